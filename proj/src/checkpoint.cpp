#include "drm/checkpoint.hpp"

#include "drm/json_io.hpp"

#include <cstdint>
#include <cstring>
#include <stdexcept>

namespace drm {

namespace {

constexpr char kMagic[8] = {'D', 'R', 'M', 'C', 'K', 'P', 'T', '\n'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint is truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const DrmModel& model, const std::filesystem::path& file,
                     const nlohmann::json& meta) {
  const nlohmann::json header = {
      {"version", kCheckpointVersion}, {"model", model.config()}, {"meta", meta}};
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  const ParameterStore& params = model.params();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params.at(i);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::int64_t>(out, p.value.rows());
    put<std::int64_t>(out, p.value.cols());
    put<std::uint8_t>(out, p.trainable ? 1 : 0);
    out.append(reinterpret_cast<const char*>(p.value.data()),
               static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  write_bytes_atomic(file, out);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  const std::string bytes = read_text(file);
  Reader r(bytes);
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(file.string() + ": not a checkpoint file");
  }
  const auto hlen = r.get<std::uint32_t>();
  const nlohmann::json header = nlohmann::json::parse(std::string(r.take(hlen), hlen));
  if (header.value("version", std::string()) != kCheckpointVersion) {
    throw std::runtime_error(file.string() + ": unsupported checkpoint version");
  }
  ParameterStore params;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>();
    std::string name(r.take(nlen), nlen);
    const auto rows = r.get<std::int64_t>();
    const auto cols = r.get<std::int64_t>();
    const bool trainable = r.get<std::uint8_t>() != 0;
    if (rows < 0 || cols < 0) throw std::runtime_error("negative tensor shape in checkpoint");
    Matrix m(rows, cols);
    const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(double);
    std::memcpy(m.data(), r.take(n), n);
    params.add(name, std::move(m), trainable);
  }
  if (!r.done()) throw std::runtime_error("trailing bytes after checkpoint payload");
  return {DrmModel(header.at("model").get<ModelConfig>(), std::move(params)),
          header.value("meta", nlohmann::json::object())};
}

}  // namespace drm
