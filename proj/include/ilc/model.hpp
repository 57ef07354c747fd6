#pragma once

// Dense leaky-rectifier classifier over a flat parameter vector, with exact
// backprop that produces one gradient row per environment.

#include "ilc/common.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <fstream>
#include <random>
#include <span>
#include <sstream>

namespace ilc {

struct Architecture {
  std::size_t input_dim = 1;
  std::size_t hidden_layers = 0;
  std::size_t hidden_units = 1;
  double activation_slope = 0.01;
  std::size_t output_classes = 2;

  void validate() const {
    require(input_dim >= 1, "architecture: input_dim must be >= 1");
    require(hidden_units >= 1, "architecture: hidden_units must be >= 1");
    require(output_classes >= 2, "architecture: output_classes must be >= 2");
    require(activation_slope >= 0.0 && activation_slope < 1.0,
            "architecture: activation_slope must lie in [0, 1)");
  }

  std::size_t num_layers() const { return hidden_layers + 1; }
  std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden_units; }
  std::size_t fan_out(std::size_t layer) const {
    return layer + 1 == num_layers() ? output_classes : hidden_units;
  }
  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) n += (fan_in(l) + 1) * fan_out(l);
    return n;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class SpanKind { weight, bias };

struct ParamSpan {
  std::size_t layer = 0;
  SpanKind kind = SpanKind::weight;
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const ParamSpan&, const ParamSpan&) = default;
};

/// Flat parameters. Layer l stores its (fan_out x fan_in) weight matrix
/// row-major, followed by its bias.
struct ParamVector {
  Architecture arch;
  Vector values;
  std::vector<ParamSpan> layout;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }

  const ParamSpan& weight_span(std::size_t layer) const { return layout[2 * layer]; }
  const ParamSpan& bias_span(std::size_t layer) const { return layout[2 * layer + 1]; }

  Eigen::Map<const RowMatrix> weights(std::size_t layer) const {
    const auto& s = weight_span(layer);
    return {values.data() + s.offset, static_cast<Eigen::Index>(arch.fan_out(layer)),
            static_cast<Eigen::Index>(arch.fan_in(layer))};
  }
  Eigen::Map<const Vector> bias(std::size_t layer) const {
    const auto& s = bias_span(layer);
    return {values.data() + s.offset, static_cast<Eigen::Index>(s.length)};
  }
};

inline std::vector<ParamSpan> make_layout(const Architecture& arch) {
  std::vector<ParamSpan> layout;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const std::size_t w = arch.fan_in(l) * arch.fan_out(l);
    layout.push_back({l, SpanKind::weight, offset, w});
    offset += w;
    layout.push_back({l, SpanKind::bias, offset, arch.fan_out(l)});
    offset += arch.fan_out(l);
  }
  return layout;
}

inline void validate_layout(const std::vector<ParamSpan>& layout, std::size_t n) {
  std::size_t expected = 0;
  for (const auto& s : layout) {
    require(s.offset == expected, "layout: spans must be contiguous and ordered");
    expected += s.length;
  }
  require(expected == n, "layout: spans must cover the parameter vector exactly");
}

inline ParamVector zero_params(const Architecture& arch) {
  arch.validate();
  ParamVector p;
  p.arch = arch;
  p.layout = make_layout(arch);
  p.values = Vector::Zero(static_cast<Eigen::Index>(arch.num_params()));
  return p;
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
inline ParamVector init_params(const Architecture& arch, std::uint64_t seed) {
  ParamVector p = zero_params(arch);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.fan_in(l)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    const auto& s = p.weight_span(l);
    for (std::size_t i = 0; i < s.length; ++i) p.values[static_cast<Eigen::Index>(s.offset + i)] = dist(rng);
  }
  return p;
}

struct LossConfig {
  double l1_coeff = 0.0;
  double l2_coeff = 0.0;
  double dropout_rate = 0.0;

  void validate() const {
    require(std::isfinite(l1_coeff) && l1_coeff >= 0.0, "loss: l1_coeff must be finite and >= 0");
    require(std::isfinite(l2_coeff) && l2_coeff >= 0.0, "loss: l2_coeff must be finite and >= 0");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "loss: dropout_rate must lie in [0, 1)");
  }
  bool has_penalty() const { return l1_coeff > 0.0 || l2_coeff > 0.0; }
  LossConfig data_only() const { return {0.0, 0.0, dropout_rate}; }
};

/// Examples from one environment; rows of `inputs` are examples.
struct EnvBatch {
  int env_id = 0;
  RowMatrix inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// Row e is the gradient of environment e's loss.
struct GradientBatch {
  RowMatrix grads;
  std::vector<int> env_ids;

  std::size_t num_envs() const { return static_cast<std::size_t>(grads.rows()); }
  std::size_t num_params() const { return static_cast<std::size_t>(grads.cols()); }
  Vector mean() const { return grads.colwise().mean().transpose(); }
};

namespace detail {

inline double leaky(double z, double slope) { return z > 0.0 ? z : slope * z; }
inline double leaky_grad(double z, double slope) { return z > 0.0 ? 1.0 : slope; }

struct Trace {
  // acts[0] is the input; acts[l + 1] is what layer l feeds forward
  // (post activation and dropout); acts.back() holds the logits.
  std::vector<RowMatrix> acts;
  std::vector<RowMatrix> pre;
  std::vector<RowMatrix> drop;
};

inline Trace run_forward(const ParamVector& p, const RowMatrix& inputs, double dropout_rate,
                         std::mt19937_64* rng) {
  const auto& arch = p.arch;
  require_dims(static_cast<std::size_t>(inputs.cols()) == arch.input_dim,
               fmt::format("forward: expected {} input features, got {}", arch.input_dim, inputs.cols()));
  const bool use_dropout = dropout_rate > 0.0 && rng != nullptr;
  Trace t;
  t.acts.reserve(arch.num_layers() + 1);
  t.acts.push_back(inputs);
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    RowMatrix z = t.acts.back() * p.weights(l).transpose();
    z.rowwise() += p.bias(l).transpose();
    if (l + 1 == arch.num_layers()) {
      t.acts.push_back(std::move(z));
      break;
    }
    RowMatrix a = z.unaryExpr([s = arch.activation_slope](double v) { return leaky(v, s); });
    if (use_dropout) {
      std::bernoulli_distribution keep(1.0 - dropout_rate);
      const double scale = 1.0 / (1.0 - dropout_rate);
      RowMatrix m(a.rows(), a.cols());
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : 0.0;
      a.array() *= m.array();
      t.drop.push_back(std::move(m));
    }
    t.pre.push_back(std::move(z));
    t.acts.push_back(std::move(a));
  }
  return t;
}

inline RowMatrix softmax_rows(const RowMatrix& logits) {
  RowMatrix p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline void check_labels(std::span<const int> labels, std::size_t classes, Eigen::Index rows) {
  require_dims(static_cast<Eigen::Index>(labels.size()) == rows, "labels: count must match batch size");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < classes,
            fmt::format("labels: index {} outside [0, {})", y, classes));
}

struct Segment {
  Eigen::Index begin = 0;
  Eigen::Index length = 0;
};

// Backpropagates dlogits (already weighted per example) and writes, for each
// segment s, the parameter gradient restricted to that segment's rows into
// out.row(s). Every row is computed from the same shared tensors so the
// result is independent of `workers`.
inline void backprop_segments(const ParamVector& p, const Trace& t, RowMatrix dz,
                              std::span<const Segment> segments, RowMatrix& out, std::size_t workers) {
  const auto& arch = p.arch;
  out.setZero(static_cast<Eigen::Index>(segments.size()), static_cast<Eigen::Index>(p.size()));
  for (std::size_t l = arch.num_layers(); l-- > 0;) {
    const RowMatrix& a_in = t.acts[l];
    const auto& ws = p.weight_span(l);
    const auto& bs = p.bias_span(l);
    const auto fo = static_cast<Eigen::Index>(arch.fan_out(l));
    const auto fi = static_cast<Eigen::Index>(arch.fan_in(l));
    parallel_for(segments.size(), workers, [&](std::size_t s) {
      const auto& seg = segments[s];
      Eigen::Map<RowMatrix> dw(out.row(static_cast<Eigen::Index>(s)).data() + ws.offset, fo, fi);
      dw.noalias() = dz.middleRows(seg.begin, seg.length).transpose() * a_in.middleRows(seg.begin, seg.length);
      Eigen::Map<Vector> db(out.row(static_cast<Eigen::Index>(s)).data() + bs.offset, fo);
      db = dz.middleRows(seg.begin, seg.length).colwise().sum().transpose();
    });
    if (l == 0) break;
    RowMatrix da = dz * p.weights(l);
    const RowMatrix& z = t.pre[l - 1];
    const double slope = arch.activation_slope;
    da.array() *= z.unaryExpr([slope](double v) { return leaky_grad(v, slope); }).array();
    if (!t.drop.empty()) da.array() *= t.drop[l - 1].array();
    dz = std::move(da);
  }
}

}  // namespace detail

/// Logits for a batch (rows are examples). No dropout.
inline RowMatrix forward(const ParamVector& p, const RowMatrix& inputs) {
  return std::move(detail::run_forward(p, inputs, 0.0, nullptr).acts.back());
}

inline double cross_entropy(const RowMatrix& logits, std::span<const int> labels) {
  detail::check_labels(labels, static_cast<std::size_t>(logits.cols()), logits.rows());
  require(logits.rows() > 0, "cross_entropy: empty batch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

inline double penalty(const ParamVector& p, const LossConfig& cfg) {
  double v = 0.0;
  if (cfg.l1_coeff > 0.0) v += cfg.l1_coeff * p.values.lpNorm<1>();
  if (cfg.l2_coeff > 0.0) v += 0.5 * cfg.l2_coeff * p.values.squaredNorm();
  return v;
}

inline Vector penalty_gradient(const ParamVector& p, const LossConfig& cfg) {
  Vector g = Vector::Zero(p.values.size());
  if (cfg.l1_coeff > 0.0) g += cfg.l1_coeff * p.values.unaryExpr([](double v) { return double(sign_of(v)); });
  if (cfg.l2_coeff > 0.0) g += cfg.l2_coeff * p.values;
  return g;
}

/// Mean softmax cross-entropy plus l1*|theta|_1 + (l2/2)*|theta|^2.
inline double loss(const RowMatrix& logits, std::span<const int> labels, const ParamVector& p,
                   const LossConfig& cfg) {
  return cross_entropy(logits, labels) + penalty(p, cfg);
}

inline double data_loss(const ParamVector& p, const RowMatrix& inputs, std::span<const int> labels) {
  return cross_entropy(forward(p, inputs), labels);
}

inline std::vector<int> predict(const ParamVector& p, const RowMatrix& inputs) {
  const RowMatrix logits = forward(p, inputs);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

inline double accuracy(const ParamVector& p, const RowMatrix& inputs, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto pred = predict(p, inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct GradOptions {
  std::size_t workers = 1;
  std::mt19937_64* dropout_rng = nullptr;  // dropout is active only when set
};

/// One row per environment: the exact gradient of that environment's mean
/// loss (plus penalties from cfg). The mean of the rows is the gradient of
/// the pooled loss (1/|E|) sum_e L_e.
inline GradientBatch env_gradients(const ParamVector& p, std::span<const EnvBatch> envs,
                                   const LossConfig& cfg, const GradOptions& opt = {}) {
  cfg.validate();
  require(!envs.empty(), "env_gradients: need at least one environment");
  Eigen::Index total = 0;
  for (const auto& e : envs) {
    require(e.size() > 0, fmt::format("env_gradients: environment {} has an empty batch", e.env_id));
    require_dims(e.inputs.rows() == static_cast<Eigen::Index>(e.size()),
                 "env_gradients: inputs and labels disagree in length");
    detail::check_labels(e.labels, p.arch.output_classes, e.inputs.rows());
    total += e.inputs.rows();
  }
  RowMatrix inputs(total, envs.front().inputs.cols());
  std::vector<detail::Segment> segs;
  Eigen::Index at = 0;
  for (const auto& e : envs) {
    require_dims(e.inputs.cols() == inputs.cols(), "env_gradients: feature width differs across environments");
    inputs.middleRows(at, e.inputs.rows()) = e.inputs;
    segs.push_back({at, e.inputs.rows()});
    at += e.inputs.rows();
  }
  const auto t = detail::run_forward(p, inputs, cfg.dropout_rate, opt.dropout_rng);
  RowMatrix dz = detail::softmax_rows(t.acts.back());
  for (std::size_t s = 0; s < envs.size(); ++s) {
    const double w = 1.0 / static_cast<double>(segs[s].length);
    for (Eigen::Index i = 0; i < segs[s].length; ++i) {
      auto row = dz.row(segs[s].begin + i);
      row(envs[s].labels[static_cast<std::size_t>(i)]) -= 1.0;
      row *= w;
    }
  }
  GradientBatch gb;
  detail::backprop_segments(p, t, std::move(dz), segs, gb.grads, opt.workers);
  if (cfg.has_penalty()) gb.grads.rowwise() += penalty_gradient(p, cfg).transpose();
  for (const auto& e : envs) gb.env_ids.push_back(e.env_id);
  return gb;
}

/// Gradient of the mean loss over a single pooled batch.
inline Vector batch_gradient(const ParamVector& p, const RowMatrix& inputs, std::span<const int> labels,
                             const LossConfig& cfg, std::mt19937_64* dropout_rng = nullptr) {
  EnvBatch b{0, inputs, std::vector<int>(labels.begin(), labels.end())};
  return env_gradients(p, std::span<const EnvBatch>(&b, 1), cfg, {1, dropout_rng}).grads.row(0).transpose();
}

/// Diagonal of the Hessian of one environment's loss by central second
/// differences: (L(x + h e_i) - 2 L(x) + L(x - h e_i)) / h^2.
inline Vector hessian_diag(const ParamVector& p, const EnvBatch& batch, const LossConfig& cfg, double step) {
  require(step > 0.0 && std::isfinite(step), "hessian_diag: step must be positive");
  auto eval = [&](const ParamVector& q) { return loss(forward(q, batch.inputs), batch.labels, q, cfg); };
  ParamVector q = p;
  const double center = eval(q);
  Vector h(p.values.size());
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    const double x = p.values[i];
    q.values[i] = x + step;
    const double up = eval(q);
    q.values[i] = x - step;
    const double down = eval(q);
    q.values[i] = x;
    h[i] = (up - 2.0 * center + down) / (step * step);
  }
  return h;
}

// ---- model file -----------------------------------------------------------

inline nlohmann::json arch_to_json(const Architecture& a) {
  return {{"input_dim", a.input_dim},   {"hidden_layers", a.hidden_layers},
          {"hidden_units", a.hidden_units}, {"activation_slope", a.activation_slope},
          {"output_classes", a.output_classes}};
}

inline Architecture arch_from_json(const nlohmann::json& j) {
  Architecture a;
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.hidden_layers = j.at("hidden_layers").get<std::size_t>();
  a.hidden_units = j.at("hidden_units").get<std::size_t>();
  a.activation_slope = j.value("activation_slope", 0.01);
  a.output_classes = j.value("output_classes", std::size_t{2});
  a.validate();
  return a;
}

/// {arch, layout, values[]}; values printed with 17 significant digits so a
/// reload is bit-exact.
inline std::string model_to_json(const ParamVector& p) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& s : p.layout)
    layout.push_back({{"layer", s.layer},
                      {"kind", s.kind == SpanKind::weight ? "weight" : "bias"},
                      {"offset", s.offset},
                      {"length", s.length}});
  std::string out = fmt::format("{{\"arch\":{},\"layout\":{},\"values\":[", arch_to_json(p.arch).dump(),
                                layout.dump());
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    if (i) out += ',';
    out += fmt::format("{:.17g}", p.values[i]);
  }
  out += "]}\n";
  return out;
}

inline ParamVector model_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ParamVector p = zero_params(arch_from_json(j.at("arch")));
  const auto& vals = j.at("values");
  require_dims(vals.size() == p.size(),
               fmt::format("model file: expected {} values, found {}", p.size(), vals.size()));
  for (std::size_t i = 0; i < vals.size(); ++i) p.values[static_cast<Eigen::Index>(i)] = vals[i].get<double>();
  if (j.contains("layout")) {
    std::vector<ParamSpan> spans;
    for (const auto& s : j["layout"])
      spans.push_back({s.at("layer").get<std::size_t>(),
                       s.at("kind").get<std::string>() == "bias" ? SpanKind::bias : SpanKind::weight,
                       s.at("offset").get<std::size_t>(), s.at("length").get<std::size_t>()});
    require(spans == p.layout, "model file: layout does not match architecture");
  }
  require_finite(p.values, "model file");
  return p;
}

inline void save_model(const std::string& path, const ParamVector& p) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open " + path + " for writing");
  f << model_to_json(p);
}

inline ParamVector load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open model file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return model_from_json(ss.str());
}

}  // namespace ilc
