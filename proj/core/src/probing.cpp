#include "memlab/probing.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "memlab/errors.hpp"
#include "memlab/optim.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/vocab.hpp"

namespace memlab::probing {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return Eigen::Map<const RowMatrix>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                     static_cast<Eigen::Index>(t.cols()));
}

void check_labels(const Tensor& x, std::span<const int> y) {
  if (x.rank() != 2 || x.rows() != y.size()) {
    throw DimensionError("probe: " + x.shape_string() + " features for " + std::to_string(y.size()) + " labels");
  }
  std::size_t ones = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw ContractError("probe labels must be 0 or 1");
    ones += static_cast<std::size_t>(v);
  }
  if (ones == 0 || ones == y.size()) throw ContractError("probe training data holds a single class");
}

}  // namespace

std::string to_string(QueryKind k) { return k == QueryKind::Username ? "username" : "user_id"; }

QueryKind query_kind_from_string(const std::string& s) {
  if (s == "username") return QueryKind::Username;
  if (s == "user_id") return QueryKind::UserId;
  throw ConfigError("unknown query kind '" + s + "' (expected username or user_id)");
}

std::vector<int> query_tokens(QueryKind k) {
  const Vocabulary& v = Vocabulary::standard();
  return k == QueryKind::Username ? v.encode_words("what is the username ?")
                                  : v.encode_words("what is the user_id of the username ?");
}

Representations collect_representations(const ModelParams& params, std::span<const corpus::SyntheticSample> samples,
                                        QueryKind kind) {
  const std::vector<int> q = query_tokens(kind);
  const std::size_t n = samples.size();
  const std::size_t d = params.config().d_model;
  const std::size_t n_layers = params.config().n_layers + 1;
  Representations out;
  out.query_kind = kind;
  out.sample_ids.resize(n);
  out.labels.resize(n);
  out.layers.assign(n_layers, Tensor({n, d}));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    if (!s.watermark || s.watermark->mode != corpus::WatermarkMode::UsernameOnly) {
      throw ContractError("probe sample " + std::to_string(s.id) + " lacks a username-only watermark");
    }
    out.sample_ids[i] = s.id;
    out.labels[i] = s.watermark->record.set_tag == corpus::SetTag::U1 ? 1 : 0;
  }
  parallel_for(n, [&](std::size_t i) {
    ForwardResult fr = forward(params, ModelInput{&samples[i].image, q, {}});
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::copy(fr.representations[l].values.begin(), fr.representations[l].values.end(),
                out.layers[l].row_span(i).begin());
    }
  });
  return out;
}

void ProbeConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("probe.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("probe.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("probe.epochs must be >= 1");
  if (reference != "clean_finetune" && reference != "pretrained")
    throw ConfigError("probe.reference must be \"clean_finetune\" or \"pretrained\"");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"standardize", c.standardize},
                     {"reference", c.reference}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.standardize = j.value("standardize", c.standardize);
  c.reference = j.value("reference", c.reference);
}

double LinearProbe::logit(std::span<const double> x) const {
  if (x.size() != weights.size()) throw DimensionError("probe: feature length mismatch");
  double z = bias;
  if (feature_mean.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * x[i];
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * (x[i] - feature_mean[i]) / feature_scale[i];
  }
  return z;
}

double accuracy(const LinearProbe& probe, const Tensor& x, std::span<const int> y) {
  if (x.rows() != y.size()) throw DimensionError("accuracy: row/label count mismatch");
  if (y.empty()) throw ContractError("accuracy: empty evaluation set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += probe.predict(x.row_span(i)) == y[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

LinearProbe train_logistic_probe(const Tensor& x, std::span<const int> y, const ProbeConfig& config) {
  config.validate();
  check_labels(x, y);
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  LinearProbe probe;
  probe.weights.assign(d, 0.0);
  Tensor feats = x;
  if (config.standardize) {
    probe.feature_mean.assign(d, 0.0);
    probe.feature_scale.assign(d, 1.0);
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (std::size_t r = 0; r < n; ++r) m += x(r, c);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t r = 0; r < n; ++r) v += (x(r, c) - m) * (x(r, c) - m);
      const double sd = std::sqrt(v / static_cast<double>(n));
      probe.feature_mean[c] = m;
      probe.feature_scale[c] = sd > 1e-12 ? sd : 1.0;
      for (std::size_t r = 0; r < n; ++r) feats(r, c) = (x(r, c) - m) / probe.feature_scale[c];
    }
  }
  Tensor w({1, d});
  Tensor b({1, 1});
  Optimizer opt(OptimizerKind::Adam, config.learning_rate);
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(config.seed, "probe-epoch", e);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      Tensor gw({1, d});
      Tensor gb({1, 1});
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        double z = b[0];
        for (std::size_t c = 0; c < d; ++c) z += w[c] * feats(i, c);
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double err = p - static_cast<double>(y[i]);
        for (std::size_t c = 0; c < d; ++c) gw[c] += err * feats(i, c);
        gb[0] += err;
      }
      const auto m = static_cast<double>(end - start);
      for (double& v : gw.data()) v /= m;
      gb[0] /= m;
      Tensor* params[] = {&w, &b};
      const Tensor grads[] = {gw, gb};
      opt.step(params, grads);
    }
  }
  probe.weights.assign(w.data().begin(), w.data().end());
  probe.bias = b[0];
  return probe;
}

LinearProbe least_squares_probe(const Tensor& x, std::span<const int> y, double ridge) {
  check_labels(x, y);
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  Eigen::MatrixXd a(n, d + 1);
  a.leftCols(d) = as_matrix(x);
  a.col(d).setOnes();
  Eigen::VectorXd t(n);
  for (Eigen::Index i = 0; i < n; ++i) t[i] = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
  Eigen::MatrixXd gram = a.transpose() * a;
  gram.diagonal().array() += ridge;
  const Eigen::VectorXd sol = gram.ldlt().solve(a.transpose() * t);
  LinearProbe probe;
  probe.weights.assign(sol.data(), sol.data() + d);
  probe.bias = sol[d];
  return probe;
}

std::size_t ProbeResult::best_layer() const {
  if (test_accuracy.empty()) throw StateError("probe result is empty");
  return static_cast<std::size_t>(std::max_element(test_accuracy.begin(), test_accuracy.end()) -
                                  test_accuracy.begin());
}

ProbeResult probe_layers(const Representations& train, const Representations& val, const Representations& test,
                         const ProbeConfig& config, std::string model_state, bool shuffle_labels) {
  if (train.layers.size() != test.layers.size() || train.layers.size() != val.layers.size()) {
    throw DimensionError("probe_layers: layer count differs between splits");
  }
  auto labels_of = [&](const Representations& r, const char* split) {
    std::vector<int> y = r.labels;
    if (shuffle_labels) {
      Rng rng(config.seed, std::string("label-shuffle-") + split);
      rng.shuffle(y.begin(), y.end());
    }
    return y;
  };
  const std::vector<int> y_train = labels_of(train, "train");
  const std::vector<int> y_val = labels_of(val, "val");
  const std::vector<int> y_test = labels_of(test, "test");
  ProbeResult res;
  res.query_kind = train.query_kind;
  res.model_state = std::move(model_state);
  res.n_train = train.size();
  res.n_val = val.size();
  res.n_test = test.size();
  const std::size_t n_layers = train.layers.size();
  res.train_accuracy.resize(n_layers);
  res.val_accuracy.resize(n_layers);
  res.test_accuracy.resize(n_layers);
  parallel_for(n_layers, [&](std::size_t l) {
    ProbeConfig cfg = config;
    cfg.seed = derive_seed(config.seed, "probe-layer", l);
    const LinearProbe probe = train_logistic_probe(train.layers[l], y_train, cfg);
    res.train_accuracy[l] = accuracy(probe, train.layers[l], y_train);
    res.val_accuracy[l] = val.size() > 0 ? accuracy(probe, val.layers[l], y_val) : 0.0;
    res.test_accuracy[l] = accuracy(probe, test.layers[l], y_test);
  });
  return res;
}

LayerwiseCurves layerwise_curve(const ModelParams& base, const ModelParams& finetuned, const corpus::ProbeSet& d_p,
                                QueryKind kind, const ProbeConfig& config) {
  if (base.config().d_model != finetuned.config().d_model || base.config().n_layers != finetuned.config().n_layers) {
    throw ConfigError("layerwise_curve: base and fine-tuned models have different shapes");
  }
  auto run = [&](const ModelParams& p, const char* state) {
    return probe_layers(collect_representations(p, d_p.train, kind), collect_representations(p, d_p.val, kind),
                        collect_representations(p, d_p.test, kind), config, state);
  };
  return LayerwiseCurves{run(base, "base"), run(finetuned, "finetuned")};
}

PcaResult pca_project(const Tensor& x, std::size_t out_dims) {
  if (x.rank() != 2) throw DimensionError("pca_project expects a matrix, got " + x.shape_string());
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (out_dims < 1 || out_dims > d) throw ContractError("pca_project: out_dims must lie in [1, d]");
  if (n < std::max<std::size_t>(out_dims, 2)) throw ContractError("pca_project: too few samples");
  const auto m = as_matrix(x);
  const Eigen::RowVectorXd mean = m.colwise().mean();
  const Eigen::MatrixXd centered = m.rowwise() - mean;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  const double total = cov.trace();
  if (!(total > 1e-300)) throw DegenerateError("pca_project: data has zero variance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca_project: eigen-decomposition failed");
  PcaResult out;
  out.components = Tensor({out_dims, d});
  out.mean.assign(mean.data(), mean.data() + d);
  const auto di = static_cast<Eigen::Index>(d);
  for (std::size_t k = 0; k < out_dims; ++k) {
    const Eigen::Index col = di - 1 - static_cast<Eigen::Index>(k);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    for (std::size_t c = 0; c < d; ++c) out.components(k, c) = v[static_cast<Eigen::Index>(c)];
    out.explained_ratio.push_back(std::max(0.0, eig.eigenvalues()[col]) / total);
  }
  const Eigen::MatrixXd comps = as_matrix(out.components);
  const Eigen::MatrixXd coords = centered * comps.transpose();
  out.coordinates = Tensor({n, out_dims});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < out_dims; ++k) {
      out.coordinates(r, k) = coords(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
    }
  }
  return out;
}

std::vector<int> expected_answer(const corpus::SyntheticSample& sample, QueryKind kind) {
  if (!sample.watermark) throw ContractError("sample " + std::to_string(sample.id) + " carries no watermark");
  const Vocabulary& v = Vocabulary::standard();
  return kind == QueryKind::Username ? v.encode_username(sample.watermark->record.username)
                                     : v.encode_digits(sample.watermark->record.user_id);
}

DirectPromptResult direct_prompt_eval(const ModelParams& params, std::span<const corpus::SyntheticSample> samples,
                                      QueryKind kind) {
  const std::vector<int> q = query_tokens(kind);
  DirectPromptResult out;
  out.query_kind = kind;
  out.correct.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const std::vector<int> target = expected_answer(samples[i], kind);
    const std::vector<int> got = generate_greedy(params, samples[i].image, q, target.size() + 1);
    out.correct[i] = got == target ? 1 : 0;
  });
  std::size_t hits = 0;
  for (int c : out.correct) hits += static_cast<std::size_t>(c);
  out.accuracy = samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
  return out;
}

}  // namespace memlab::probing
