#include "drm/dkt.hpp"

#include "drm/training.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace drm {

namespace {

template <typename Key>
std::map<Key, ClassStats> estimate_stats(const Matrix& features, std::span<const Key> labels,
                                         double eps) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw std::invalid_argument("one label per feature row required");
  }
  std::map<Key, std::vector<Eigen::Index>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) rows[labels[i]].push_back(static_cast<Eigen::Index>(i));
  const Eigen::Index d = features.cols();
  std::map<Key, ClassStats> out;
  for (const auto& [key, idx] : rows) {
    ClassStats s;
    s.count = static_cast<int>(idx.size());
    s.mu = Vector::Zero(d);
    for (auto r : idx) s.mu += features.row(r).transpose();
    s.mu /= static_cast<double>(idx.size());
    if (idx.size() == 1) {
      s.sigma = eps * Matrix::Identity(d, d);
      s.degenerate = true;
    } else {
      Matrix centered(static_cast<Eigen::Index>(idx.size()), d);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        centered.row(static_cast<Eigen::Index>(k)) = features.row(idx[k]) - s.mu.transpose();
      }
      s.sigma = centered.transpose() * centered / static_cast<double>(idx.size() - 1);
      s.sigma = 0.5 * (s.sigma + s.sigma.transpose()).eval();
    }
    out.emplace(key, std::move(s));
  }
  return out;
}

std::mt19937_64 class_rng(std::uint64_t seed, std::uint64_t kind, const TripletKey& key) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind),
                    static_cast<std::uint32_t>(key.subject_category + 1),
                    static_cast<std::uint32_t>(key.predicate + 1),
                    static_cast<std::uint32_t>(key.object_category + 1)};
  return std::mt19937_64(seq);
}

CalibratedStats calibrate(const ClassStats& tail, const std::vector<const ClassStats*>& heads,
                          int n, int q, bool transfer) {
  CalibratedStats c;
  c.mu = tail.mu;
  c.count = tail.count;
  c.target = q;
  if (!transfer || heads.empty() || n >= q) {
    c.sigma_prime = tail.sigma;
    c.passthrough = true;
    return c;
  }
  std::vector<Vector> means;
  std::vector<Matrix> sigmas;
  for (const ClassStats* h : heads) {
    means.push_back(h->mu);
    sigmas.push_back(h->sigma);
  }
  c.alpha = transfer_weights(tail.mu, means);
  c.sigma_prime = calibrate_covariance(tail.sigma, sigmas, c.alpha, n, q);
  return c;
}

std::vector<double> to_vec(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

Matrix from_vec(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) {
    throw std::invalid_argument("matrix payload has the wrong size");
  }
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

nlohmann::json stats_json(const ClassStats& s) {
  return {{"mu", to_vec(s.mu.transpose())},
          {"sigma", to_vec(s.sigma)},
          {"n", s.count},
          {"degenerate", s.degenerate}};
}

ClassStats stats_from(const nlohmann::json& j) {
  ClassStats s;
  const auto mu = j.at("mu").get<std::vector<double>>();
  const auto d = static_cast<Eigen::Index>(mu.size());
  s.mu = Eigen::Map<const Vector>(mu.data(), d);
  s.sigma = from_vec(j.at("sigma").get<std::vector<double>>(), d, d);
  s.count = j.at("n").get<int>();
  s.degenerate = j.value("degenerate", false);
  return s;
}

nlohmann::json calibrated_json(const CalibratedStats& c) {
  return {{"mu", to_vec(c.mu.transpose())},
          {"sigma_prime", to_vec(c.sigma_prime)},
          {"alpha", to_vec(c.alpha.transpose())},
          {"n", c.count},
          {"Q", c.target},
          {"passthrough", c.passthrough}};
}

CalibratedStats calibrated_from(const nlohmann::json& j) {
  CalibratedStats c;
  const auto mu = j.at("mu").get<std::vector<double>>();
  const auto d = static_cast<Eigen::Index>(mu.size());
  c.mu = Eigen::Map<const Vector>(mu.data(), d);
  c.sigma_prime = from_vec(j.at("sigma_prime").get<std::vector<double>>(), d, d);
  const auto alpha = j.at("alpha").get<std::vector<double>>();
  c.alpha = Eigen::Map<const Vector>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
  c.count = j.at("n").get<int>();
  c.target = j.at("Q").get<int>();
  c.passthrough = j.at("passthrough").get<bool>();
  return c;
}

TripletKey triplet_key_from_string(const std::string& s) {
  TripletKey k;
  char d1 = 0, d2 = 0;
  std::istringstream in(s);
  if (!(in >> k.subject_category >> d1 >> k.predicate >> d2 >> k.object_category) || d1 != '-' ||
      d2 != '-') {
    throw std::invalid_argument("bad triplet key: " + s);
  }
  return k;
}

}  // namespace

std::map<int, ClassStats> estimate_class_stats(const Matrix& features, std::span<const int> labels,
                                               double eps) {
  return estimate_stats(features, labels, eps);
}

std::map<TripletKey, ClassStats> estimate_class_stats(const Matrix& features,
                                                      std::span<const TripletKey> labels,
                                                      double eps) {
  return estimate_stats(features, labels, eps);
}

HeadTailSplit split_head_tail(const FrequencyTable& freq, int triplet_threshold) {
  const int cp = static_cast<int>(freq.predicate_counts.size());
  std::vector<int> order(static_cast<std::size_t>(cp));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return freq.predicate_counts[a] > freq.predicate_counts[b];
  });
  const int n_head = (cp + 1) / 2;
  HeadTailSplit s;
  s.triplet_threshold = triplet_threshold;
  s.head_predicates.assign(order.begin(), order.begin() + n_head);
  s.tail_predicates.assign(order.begin() + n_head, order.end());
  std::sort(s.head_predicates.begin(), s.head_predicates.end());
  std::sort(s.tail_predicates.begin(), s.tail_predicates.end());
  auto is_head = [&](int p) {
    return std::binary_search(s.head_predicates.begin(), s.head_predicates.end(), p);
  };
  for (const auto& [key, count] : freq.triplet_counts) {
    if (is_head(key.predicate)) {
      if (count > triplet_threshold) s.head_triplets.push_back(key);
    } else {
      s.tail_triplets.push_back(key);
    }
  }
  return s;
}

Vector transfer_weights(const Vector& mu, std::span<const Vector> head_means) {
  if (head_means.empty()) throw std::invalid_argument("transfer needs at least one head class");
  Vector neg(static_cast<Eigen::Index>(head_means.size()));
  for (std::size_t j = 0; j < head_means.size(); ++j) {
    neg[static_cast<Eigen::Index>(j)] = -(mu - head_means[j]).norm();
  }
  const Vector e = (neg.array() - neg.maxCoeff()).exp();
  return e / e.sum();
}

Matrix calibrate_covariance(const Matrix& sigma, std::span<const Matrix> head_sigmas,
                            const Vector& alpha, int n, int q) {
  if (n <= 0 || q <= 0) throw std::invalid_argument("class counts must be positive");
  if (static_cast<Eigen::Index>(head_sigmas.size()) != alpha.size()) {
    throw std::invalid_argument("one weight per head covariance required");
  }
  if (n >= q) {
    if (n > q) std::clog << "warning: N > Q, covariance passed through\n";
    return sigma;
  }
  const double r = static_cast<double>(n) / q;
  Matrix mixed = Matrix::Zero(sigma.rows(), sigma.cols());
  for (std::size_t j = 0; j < head_sigmas.size(); ++j) {
    mixed += alpha[static_cast<Eigen::Index>(j)] * head_sigmas[j];
  }
  Matrix out = r * sigma + (1.0 - r) * mixed;
  return 0.5 * (out + out.transpose());
}

Matrix sample_synthetic(const Vector& mu, const Matrix& sigma, int n, std::uint64_t seed,
                        double eps) {
  if (n < 0) throw std::invalid_argument("sample count must be non-negative");
  const Eigen::Index d = mu.size();
  if (sigma.rows() != d || sigma.cols() != d) throw std::invalid_argument("covariance shape");
  Eigen::LLT<Matrix> llt(sigma + eps * Matrix::Identity(d, d));
  if (llt.info() != Eigen::Success) throw std::runtime_error("Cholesky failed after jitter");
  const Matrix lower = llt.matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(n, d);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
  Matrix out = z * lower.transpose();
  out.rowwise() += mu.transpose();
  return out;
}

const char* to_string(DktMode mode) {
  switch (mode) {
    case DktMode::None: return "none";
    case DktMode::P: return "P";
    case DktMode::T: return "T";
    case DktMode::PT: return "PT";
  }
  return "?";
}

DktMode dkt_mode_from_string(const std::string& name) {
  if (name == "none") return DktMode::None;
  if (name == "P") return DktMode::P;
  if (name == "T") return DktMode::T;
  if (name == "PT") return DktMode::PT;
  throw ValidationError("unknown dkt mode: " + name);
}

void to_json(nlohmann::json& j, const DktConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"triplet_threshold", c.triplet_threshold},
       {"q_override", c.q_override ? nlohmann::json(*c.q_override) : nlohmann::json(nullptr)},
       {"epsilon", c.epsilon},
       {"finetune_epochs", c.finetune_epochs},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"batch_size", c.batch_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DktConfig& c) {
  const DktConfig d;
  c.mode = dkt_mode_from_string(j.value("mode", std::string(to_string(d.mode))));
  c.triplet_threshold = j.value("triplet_threshold", d.triplet_threshold);
  if (j.contains("q_override") && !j.at("q_override").is_null()) {
    c.q_override = j.at("q_override").get<int>();
  } else {
    c.q_override.reset();
  }
  c.epsilon = j.value("epsilon", d.epsilon);
  c.finetune_epochs = j.value("finetune_epochs", d.finetune_epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
}

DktStats compute_dkt_stats(const RelationFeatures& real, const FrequencyTable& train_freq,
                           const DktConfig& cfg) {
  if (cfg.q_override && *cfg.q_override <= 0) throw std::invalid_argument("Q must be positive");
  if (!(cfg.epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
  DktStats s;
  s.mode = cfg.mode;
  s.split = split_head_tail(train_freq, cfg.triplet_threshold);
  s.predicate = estimate_class_stats(real.predicate, real.predicate_labels, cfg.epsilon);
  s.triplet = estimate_class_stats(real.triplet, real.triplet_keys, cfg.epsilon);

  auto count_of = [&](int p) {
    const auto it = s.predicate.find(p);
    return it == s.predicate.end() ? 0 : it->second.count;
  };
  if (cfg.q_override) {
    s.q = *cfg.q_override;
  } else {
    s.q = 0;
    for (int p : s.split.head_predicates) {
      const int c = count_of(p);
      if (s.q == 0 || c < s.q) s.q = c;
    }
  }
  if (s.q <= 0) throw std::runtime_error("Q is zero: a head predicate has no training records");

  std::vector<const ClassStats*> head_p, head_t;
  for (int p : s.split.head_predicates) {
    if (const auto it = s.predicate.find(p); it != s.predicate.end()) head_p.push_back(&it->second);
  }
  for (const auto& key : s.split.head_triplets) {
    if (const auto it = s.triplet.find(key); it != s.triplet.end()) head_t.push_back(&it->second);
  }
  const bool transfer_p = cfg.mode == DktMode::P || cfg.mode == DktMode::PT;
  const bool transfer_t = cfg.mode == DktMode::T || cfg.mode == DktMode::PT;
  for (int p : s.split.tail_predicates) {
    const auto it = s.predicate.find(p);
    if (it == s.predicate.end()) {
      throw std::runtime_error("tail predicate " + std::to_string(p) + " has no training records");
    }
    s.predicate_calibrated.emplace(
        p, calibrate(it->second, head_p, it->second.count, s.q, transfer_p));
  }
  for (const auto& key : s.split.tail_triplets) {
    const auto it = s.triplet.find(key);
    if (it == s.triplet.end()) continue;
    const int n_pred = count_of(key.predicate);
    CalibratedStats c = calibrate(it->second, head_t, n_pred, s.q, transfer_t);
    c.count = it->second.count;
    s.triplet_calibrated.emplace(key, std::move(c));
  }
  return s;
}

nlohmann::json to_json(const DktStats& s) {
  nlohmann::json j;
  j["mode"] = to_string(s.mode);
  j["Q"] = s.q;
  j["triplet_threshold"] = s.split.triplet_threshold;
  j["head_predicates"] = s.split.head_predicates;
  j["tail_predicates"] = s.split.tail_predicates;
  auto keys = [](const std::vector<TripletKey>& v) {
    std::vector<std::string> out;
    for (const auto& k : v) out.push_back(to_string(k));
    return out;
  };
  j["head_triplets"] = keys(s.split.head_triplets);
  j["tail_triplets"] = keys(s.split.tail_triplets);
  j["predicate"] = nlohmann::json::object();
  for (const auto& [p, st] : s.predicate) j["predicate"][std::to_string(p)] = stats_json(st);
  j["triplet"] = nlohmann::json::object();
  for (const auto& [k, st] : s.triplet) j["triplet"][to_string(k)] = stats_json(st);
  j["predicate_calibrated"] = nlohmann::json::object();
  for (const auto& [p, c] : s.predicate_calibrated) {
    j["predicate_calibrated"][std::to_string(p)] = calibrated_json(c);
  }
  j["triplet_calibrated"] = nlohmann::json::object();
  for (const auto& [k, c] : s.triplet_calibrated) {
    j["triplet_calibrated"][to_string(k)] = calibrated_json(c);
  }
  return j;
}

DktStats dkt_stats_from_json(const nlohmann::json& j) {
  DktStats s;
  s.mode = dkt_mode_from_string(j.at("mode").get<std::string>());
  s.q = j.at("Q").get<int>();
  s.split.triplet_threshold = j.at("triplet_threshold").get<int>();
  s.split.head_predicates = j.at("head_predicates").get<std::vector<int>>();
  s.split.tail_predicates = j.at("tail_predicates").get<std::vector<int>>();
  for (const auto& k : j.at("head_triplets")) {
    s.split.head_triplets.push_back(triplet_key_from_string(k.get<std::string>()));
  }
  for (const auto& k : j.at("tail_triplets")) {
    s.split.tail_triplets.push_back(triplet_key_from_string(k.get<std::string>()));
  }
  for (const auto& [k, v] : j.at("predicate").items()) s.predicate.emplace(std::stoi(k), stats_from(v));
  for (const auto& [k, v] : j.at("triplet").items()) {
    s.triplet.emplace(triplet_key_from_string(k), stats_from(v));
  }
  for (const auto& [k, v] : j.at("predicate_calibrated").items()) {
    s.predicate_calibrated.emplace(std::stoi(k), calibrated_from(v));
  }
  for (const auto& [k, v] : j.at("triplet_calibrated").items()) {
    s.triplet_calibrated.emplace(triplet_key_from_string(k), calibrated_from(v));
  }
  return s;
}

std::vector<int> BalancedSet::class_histogram(int num_predicates) const {
  std::vector<int> h(static_cast<std::size_t>(num_predicates), 0);
  for (int l : labels) {
    if (l < 0 || l >= num_predicates) throw std::out_of_range("label outside predicate range");
    ++h[static_cast<std::size_t>(l)];
  }
  return h;
}

BalancedSet build_balanced_set(const RelationFeatures& real, const DktStats& stats,
                               std::uint64_t seed) {
  if (stats.q <= 0) throw std::invalid_argument("Q must be positive");
  const int q = stats.q;
  const Eigen::Index d_p = real.predicate.cols(), d_t = real.triplet.cols();
  std::map<int, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < real.predicate_labels.size(); ++i) {
    by_class[real.predicate_labels[i]].push_back(static_cast<Eigen::Index>(i));
  }

  std::vector<Matrix> p_parts, t_parts;
  BalancedSet out;
  auto take_real = [&](int p, int limit) {
    std::vector<Eigen::Index> idx = by_class[p];
    if (static_cast<int>(idx.size()) > limit) {
      auto rng = class_rng(seed, 1, {0, p, 0});
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(limit));
      std::sort(idx.begin(), idx.end());
    }
    Matrix pm(static_cast<Eigen::Index>(idx.size()), d_p), tm(static_cast<Eigen::Index>(idx.size()), d_t);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      pm.row(static_cast<Eigen::Index>(k)) = real.predicate.row(idx[k]);
      tm.row(static_cast<Eigen::Index>(k)) = real.triplet.row(idx[k]);
    }
    p_parts.push_back(std::move(pm));
    t_parts.push_back(std::move(tm));
    out.labels.insert(out.labels.end(), idx.size(), p);
    out.synthetic.insert(out.synthetic.end(), idx.size(), false);
    return static_cast<int>(idx.size());
  };

  for (int p : stats.split.head_predicates) {
    if (take_real(p, q) != q) {
      throw std::runtime_error("head predicate " + std::to_string(p) + " has fewer than Q records");
    }
  }
  for (int p : stats.split.tail_predicates) {
    const int have = take_real(p, q);
    const int missing = q - have;
    if (missing == 0) continue;
    const auto pc = stats.predicate_calibrated.find(p);
    if (pc == stats.predicate_calibrated.end()) {
      throw std::runtime_error("no calibrated stats for tail predicate " + std::to_string(p));
    }
    p_parts.push_back(sample_synthetic(pc->second.mu, pc->second.sigma_prime, missing,
                                       class_rng(seed, 2, {0, p, 0})()));

    // Largest-remainder allocation over this predicate's tail triplet types.
    std::vector<std::pair<TripletKey, const CalibratedStats*>> types;
    long total = 0;
    for (const auto& [key, c] : stats.triplet_calibrated) {
      if (key.predicate == p) {
        types.emplace_back(key, &c);
        total += c.count;
      }
    }
    if (types.empty() || total == 0) {
      throw std::runtime_error("no tail triplet stats for predicate " + std::to_string(p));
    }
    std::vector<int> alloc(types.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    int assigned = 0;
    for (std::size_t k = 0; k < types.size(); ++k) {
      const double exact = static_cast<double>(missing) * types[k].second->count / total;
      alloc[k] = static_cast<int>(std::floor(exact));
      assigned += alloc[k];
      remainders.emplace_back(exact - alloc[k], k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int r = 0; r < missing - assigned; ++r) ++alloc[remainders[static_cast<std::size_t>(r)].second];
    Matrix tm(missing, d_t);
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < types.size(); ++k) {
      if (alloc[k] == 0) continue;
      const CalibratedStats& c = *types[k].second;
      tm.middleRows(row, alloc[k]) =
          sample_synthetic(c.mu, c.sigma_prime, alloc[k], class_rng(seed, 3, types[k].first)());
      row += alloc[k];
    }
    t_parts.push_back(std::move(tm));
    out.labels.insert(out.labels.end(), static_cast<std::size_t>(missing), p);
    out.synthetic.insert(out.synthetic.end(), static_cast<std::size_t>(missing), true);
  }

  Eigen::Index n = 0;
  for (const auto& m : p_parts) n += m.rows();
  out.predicate.resize(n, d_p);
  out.triplet.resize(n, d_t);
  Eigen::Index off = 0;
  for (std::size_t k = 0; k < p_parts.size(); ++k) {
    out.predicate.middleRows(off, p_parts[k].rows()) = p_parts[k];
    out.triplet.middleRows(off, t_parts[k].rows()) = t_parts[k];
    off += p_parts[k].rows();
  }
  return out;
}

std::vector<double> finetune_classifier(DrmModel& model, const BalancedSet& set,
                                        const DktConfig& cfg) {
  if (cfg.batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  const auto frozen = frozen_prefixes();
  const std::string before = model.params().content_hash(frozen);
  const std::string trainable = prefix::kRelationClassifier + ".";
  const auto allow = [&](const std::string& name) { return name.rfind(trainable, 0) == 0; };

  SgdMomentum opt(model.params(), cfg.learning_rate, cfg.momentum);
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(set.labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const int> rows(order.data() + start, end - start);
      Matrix p(static_cast<Eigen::Index>(rows.size()), set.predicate.cols());
      Matrix t(static_cast<Eigen::Index>(rows.size()), set.triplet.cols());
      std::vector<int> labels;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        p.row(static_cast<Eigen::Index>(k)) = set.predicate.row(rows[k]);
        t.row(static_cast<Eigen::Index>(k)) = set.triplet.row(rows[k]);
        labels.push_back(set.labels[static_cast<std::size_t>(rows[k])]);
      }
      Tape tape(&model.params());
      const Var logits = model.relation_logits(tape, tape.constant(p), tape.constant(t));
      const Var loss = ops::scale(ops::cross_entropy_sum(logits, labels), 1.0 / labels.size());
      if (!std::isfinite(loss.value()(0, 0))) throw NonFiniteLoss("fine-tune CE");
      tape.backward(loss);
      Gradients grads(model.params());
      tape.collect(grads);
      opt.step(model.params(), grads, allow);
      sum += loss.value()(0, 0);
      ++batches;
    }
    losses.push_back(batches > 0 ? sum / batches : 0.0);
  }
  if (model.params().content_hash(frozen) != before) {
    throw std::logic_error("fine-tuning modified a frozen parameter");
  }
  return losses;
}

}  // namespace drm
