#include "drm/checkpoint.hpp"
#include "drm/featurizer.hpp"
#include "drm/json_io.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>

using namespace drm;

namespace {

Matrix logits(const DrmModel& m, const SceneGraphSample& s) {
  const FeatureBundle f = featurize(s, m.tables(), 5);
  Tape t(&m.params());
  const auto enc = m.encode(t, f.entity, f.semantic, f.union_, f.pairs, &f.labels);
  return m.relation_logits(t, enc.p_prime, enc.t_prime).value();
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("save then load reproduces the forward pass bit for bit") {
    const auto dir = testing::scratch_dir("ckpt_roundtrip");
    DrmModel model(testing::tiny_model_config(4));
    save_checkpoint(model, dir / "m.ckpt", {{"stage", "stage1"}});
    const LoadedCheckpoint back = load_checkpoint(dir / "m.ckpt");
    CHECK(back.meta.at("stage") == "stage1");
    CHECK(back.model.params().content_hash() == model.params().content_hash());
    CHECK(nlohmann::json(back.model.config()) == nlohmann::json(model.config()));

    std::mt19937_64 rng(2);
    const auto scene = testing::random_scene(4, 4, rng, {{0, 1, 2}});
    CHECK(logits(back.model, scene) == logits(model, scene));
    Tape unbound;
    const FeatureBundle f = featurize(scene, model.tables(), 5);
    CHECK_THROWS_AS(model.encode(unbound, f.entity, f.semantic, f.union_, f.pairs, nullptr),
                    std::logic_error);
  }

  TEST_CASE("bad magic and truncation are rejected") {
    const auto dir = testing::scratch_dir("ckpt_bad");
    DrmModel model(testing::tiny_model_config());
    save_checkpoint(model, dir / "m.ckpt");
    const std::string bytes = read_text(dir / "m.ckpt");

    std::string wrong = bytes;
    wrong[0] = 'X';
    write_bytes_atomic(dir / "magic.ckpt", wrong);
    CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), std::runtime_error);

    for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
      write_bytes_atomic(dir / "cut.ckpt", bytes.substr(0, cut));
      CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), std::runtime_error);
    }
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
  }
}
