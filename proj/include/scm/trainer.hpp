#pragma once
// Self-reconstruction training: configuration, Adam, the alternating D/G
// step, evaluation metrics and checkpoints.

#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>

#include "scm/model.hpp"
#include "scm/synthfig.hpp"

namespace scm {

struct TrainConfig {
  ModelConfig model;
  std::int64_t steps = 2000;
  std::int64_t batch = 4;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  bool no_bsr = false;
  bool augment_pose = false;
  double clip_norm = 10.0;  // <= 0 disables clipping
  double bsr_adjacency_weight = 1.0;
  std::uint64_t pyramid_seed = kDefaultPyramidSeed;
  std::uint64_t seed = 1;  // data order and augmentation

  void validate() const {
    model.validate();
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0,1)");
    for (double w : {weights.adv, weights.rec, weights.perc, weights.style, weights.graph})
      if (!(w >= 0)) throw ConfigError("loss weights must be non-negative");
  }

  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (no_bsr) w.graph = 0.0;
    return w;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && ws(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": " + v);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": " + v);
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": " + v);
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long d = std::stoull(v, &pos, 0);
    if (pos != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad unsigned integer for " + key + ": " + v);
  }
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// Applies one key=value setting.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string& v = value;
  if (key == "steps") c.steps = parse_int(key, v);
  else if (key == "batch") c.batch = parse_int(key, v);
  else if (key == "lr") c.lr = parse_double(key, v);
  else if (key == "beta1") c.beta1 = parse_double(key, v);
  else if (key == "beta2") c.beta2 = parse_double(key, v);
  else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
  else if (key == "w_adv") c.weights.adv = parse_double(key, v);
  else if (key == "w_rec") c.weights.rec = parse_double(key, v);
  else if (key == "w_perc") c.weights.perc = parse_double(key, v);
  else if (key == "w_style") c.weights.style = parse_double(key, v);
  else if (key == "w_graph") c.weights.graph = parse_double(key, v);
  else if (key == "no_dse") c.model.no_dse = parse_bool(key, v);
  else if (key == "no_ccf") c.model.no_ccf = parse_bool(key, v);
  else if (key == "no_bsr") c.no_bsr = parse_bool(key, v);
  else if (key == "augment_pose") c.augment_pose = parse_bool(key, v);
  else if (key == "clip_norm") c.clip_norm = parse_double(key, v);
  else if (key == "bsr_adjacency_weight") c.bsr_adjacency_weight = parse_double(key, v);
  else if (key == "pyramid_seed") c.pyramid_seed = parse_u64(key, v);
  else if (key == "seed") c.seed = parse_u64(key, v);
  else if (key == "model_seed") c.model.seed = parse_u64(key, v);
  else if (key == "image_res") c.model.image_res = parse_int(key, v);
  else if (key == "feature_res") c.model.feature_res = parse_int(key, v);
  else if (key == "temperature") c.model.temperature = parse_double(key, v);
  else if (key == "field_direction") {
    if (v == "pose_query") c.model.direction = FieldDirection::kPoseQuery;
    else if (v == "style_query") c.model.direction = FieldDirection::kStyleQuery;
    else throw ConfigError("field_direction must be pose_query or style_query");
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

// Parses flat key=value text; '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), base);
}

inline std::string config_to_string(const TrainConfig& c) {
  using detail::fmt_double;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "steps=" << c.steps << "\nbatch=" << c.batch << "\nlr=" << fmt_double(c.lr)
     << "\nbeta1=" << fmt_double(c.beta1) << "\nbeta2=" << fmt_double(c.beta2)
     << "\nadam_eps=" << fmt_double(c.adam_eps) << "\nw_adv=" << fmt_double(c.weights.adv)
     << "\nw_rec=" << fmt_double(c.weights.rec) << "\nw_perc=" << fmt_double(c.weights.perc)
     << "\nw_style=" << fmt_double(c.weights.style) << "\nw_graph=" << fmt_double(c.weights.graph)
     << "\nno_dse=" << b(c.model.no_dse) << "\nno_ccf=" << b(c.model.no_ccf) << "\nno_bsr=" << b(c.no_bsr)
     << "\naugment_pose=" << b(c.augment_pose) << "\nclip_norm=" << fmt_double(c.clip_norm)
     << "\nbsr_adjacency_weight=" << fmt_double(c.bsr_adjacency_weight) << "\npyramid_seed=" << c.pyramid_seed
     << "\nseed=" << c.seed << "\nmodel_seed=" << c.model.seed << "\nimage_res=" << c.model.image_res
     << "\nfeature_res=" << c.model.feature_res << "\ntemperature=" << fmt_double(c.model.temperature)
     << "\nfield_direction="
     << (c.model.direction == FieldDirection::kPoseQuery ? "pose_query" : "style_query") << "\n";
  return os.str();
}

// ---------------------------------------------------------------- optimizer

struct AdamMoments {
  std::vector<double> m, v;
};

// One bias-corrected Adam update at (1-based) step t.
inline void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& mom, double lr,
                        double beta1, double beta2, double eps, std::int64_t t) {
  if (grad.size() != param.size()) throw DimensionError("adam_update: grad/param size mismatch");
  if (mom.m.size() != param.size()) mom.m.assign(param.size(), 0.0);
  if (mom.v.size() != param.size()) mom.v.assign(param.size(), 0.0);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * grad[i];
    mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mh = mom.m[i] / c1, vh = mom.v[i] / c2;
    param[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
}

// Adam over a parameter group, moments keyed by parameter name.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamSet& ps, std::int64_t t) {
    for (auto& [name, p] : ps.entries()) {
      if (!p.has_grad()) continue;
      adam_update(p.mutable_data(), p.grad(), moments_[name], lr_, b1_, b2_, eps_, t);
    }
  }

  std::map<std::string, AdamMoments>& moments() { return moments_; }
  const std::map<std::string, AdamMoments>& moments() const { return moments_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::map<std::string, AdamMoments> moments_;
};

// Scales all gradients of `ps` so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParamSet& ps, double max_norm) {
  double sq = 0;
  for (auto& [n, p] : ps.entries())
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [n, p] : ps.entries())
      for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------- batches

struct Batch {
  Tensor image, mask, pose, target_pose;
  std::vector<std::int64_t> indices;
};

inline Batch make_batch(const std::vector<synth::FigureSample>& data, const std::vector<std::int64_t>& idx) {
  std::vector<Tensor> im, mk, sk;
  for (auto i : idx) {
    if (i < 0 || i >= static_cast<std::int64_t>(data.size())) throw UsageError("sample index out of range");
    const auto& s = data[static_cast<std::size_t>(i)];
    im.push_back(s.image);
    mk.push_back(s.mask);
    sk.push_back(s.skeleton);
  }
  Batch b;
  b.image = synth::stack(im);
  b.mask = synth::stack(mk);
  b.pose = synth::stack(sk);
  b.target_pose = b.pose;
  b.indices = idx;
  return b;
}

// Sample indices for a training step: epochs are independent shuffles seeded
// by (seed, epoch), so any step's batch is computable without history.
inline std::vector<std::int64_t> batch_indices(std::int64_t step, std::int64_t n, std::int64_t batch,
                                               std::uint64_t seed) {
  std::vector<std::int64_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> perm;
  for (std::int64_t i = 0; i < batch; ++i) {
    const std::int64_t g = step * batch + i, epoch = g / n;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(splitmix64(seed ^ (0xE0C4ull * static_cast<std::uint64_t>(epoch + 1))));
      for (std::int64_t k = n - 1; k > 0; --k) {
        std::uniform_int_distribution<std::int64_t> ud(0, k);
        std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(ud(rng))]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(g % n)]);
  }
  return out;
}

// ---------------------------------------------------------------- training state

struct StepMetrics {
  std::int64_t step = 0;
  double adv_d = 0, adv_g = 0, rec = 0, perc = 0, style = 0, graph = 0, total = 0;

  bool operator==(const StepMetrics&) const = default;
  static std::string csv_header() { return "step,adv_d,adv_g,rec,perc,style,graph,total"; }
  std::string csv() const {
    using detail::fmt_double;
    return std::to_string(step) + "," + fmt_double(adv_d) + "," + fmt_double(adv_g) + "," + fmt_double(rec) + "," +
           fmt_double(perc) + "," + fmt_double(style) + "," + fmt_double(graph) + "," + fmt_double(total);
  }
};

struct Losses {
  LossTerms terms;
  Tensor total;
};

class TrainState {
 public:
  explicit TrainState(const TrainConfig& cfg)
      : cfg_(cfg),
        net_((cfg.validate(), cfg.model)),
        pyramid_(cfg.pyramid_seed),
        opt_g_(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps),
        opt_d_(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) {}

  const TrainConfig& config() const { return cfg_; }
  ScmNet& net() { return net_; }
  const ScmNet& net() const { return net_; }
  const FeaturePyramid& pyramid() const { return pyramid_; }
  Adam& opt_g() { return opt_g_; }
  Adam& opt_d() { return opt_d_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  // Extends (or shortens) the step budget, e.g. when resuming a checkpoint.
  void set_total_steps(std::int64_t n) {
    if (n < 0) throw ConfigError("steps must be >= 0");
    cfg_.steps = n;
  }

  // Generator-side terms for an already generated image.
  Losses generator_losses(const Tensor& fake, const Batch& b) const {
    Losses l;
    l.terms.adv_g = l_adv_g(net_.d_style().logits(fake), net_.d_pose().logits(fake, b.target_pose));
    l.terms.rec = l_rec(fake, b.image);
    l.terms.perc = l_perc(fake, b.image, pyramid_);
    l.terms.style = l_style(fake, b.image, pyramid_);
    l.terms.graph = l_bsr(fake, b.image, b.mask, pyramid_, cfg_.bsr_adjacency_weight);
    l.total = l_total(l.terms, cfg_.effective_weights());
    return l;
  }

  Tensor discriminator_loss(const Tensor& fake, const Batch& b) const {
    return l_adv_d(net_.d_style().logits(b.image), net_.d_pose().logits(b.image, b.target_pose),
                   net_.d_style().logits(fake), net_.d_pose().logits(fake, b.target_pose));
  }

  // Discriminator update on real images versus a (detached) generated batch.
  double d_step(const Tensor& fake, const Batch& b, std::int64_t t) {
    auto& dp = net_.discriminator_params();
    Tape dtape;
    Tape::Scope dscope(dtape);
    dp.zero_grad();
    Tensor ld = discriminator_loss(fake.detach(), b);
    const double v = checked(ld, "adv_d");
    dtape.backward(ld);
    clip_grad_norm(dp, cfg_.clip_norm);
    opt_d_.step(dp, t);
    return v;
  }

  // Generator update; `tape` must hold the recording of `fake`'s forward pass
  // and be the active tape.
  Losses g_step(Tape& tape, const Tensor& fake, const Batch& b, std::int64_t t) {
    auto& gp = net_.generator_params();
    auto& dp = net_.discriminator_params();
    gp.zero_grad();
    Losses l = generator_losses(fake, b);
    for (auto [v, name] : {std::pair{&l.terms.adv_g, "adv_g"}, {&l.terms.rec, "rec"}, {&l.terms.perc, "perc"},
                           {&l.terms.style, "style"}, {&l.terms.graph, "graph"}, {&l.total, "total"}})
      checked(*v, name);
    tape.backward(l.total);
    clip_grad_norm(gp, cfg_.clip_norm);
    opt_g_.step(gp, t);
    dp.zero_grad();
    return l;
  }

  // One discriminator update followed by one generator update. The generator
  // forward pass is shared: the D-step leaves generator parameters untouched,
  // so re-running it would reproduce the same image.
  StepMetrics train_step(const Batch& b) {
    const std::int64_t t = step_ + 1;
    StepMetrics m;
    m.step = step_;
    Tape gtape;
    Tape::Scope gscope(gtape);
    ForwardResult fwd = net_.forward(b.image, b.mask, b.target_pose);
    m.adv_d = d_step(fwd.output, b, t);
    Losses l = g_step(gtape, fwd.output, b, t);
    m.adv_g = l.terms.adv_g.item();
    m.rec = l.terms.rec.item();
    m.perc = l.terms.perc.item();
    m.style = l.terms.style.item();
    m.graph = l.terms.graph.item();
    m.total = l.total.item();
    ++step_;
    return m;
  }

  Batch training_batch(const std::vector<synth::FigureSample>& data, std::int64_t step) const {
    Batch b = make_batch(data, batch_indices(step, static_cast<std::int64_t>(data.size()), cfg_.batch, cfg_.seed));
    if (cfg_.augment_pose) {
      std::vector<Tensor> sk;
      for (auto i : b.indices) {
        auto spec = synth::perturb_pose(data[static_cast<std::size_t>(i)].spec,
                                        splitmix64(cfg_.seed + 7919ull * static_cast<std::uint64_t>(step)) ^
                                            static_cast<std::uint64_t>(i));
        sk.push_back(synth::render_skeleton(spec));
      }
      b.pose = synth::stack(sk);
      b.target_pose = b.pose;
    }
    return b;
  }

 private:
  double checked(const Tensor& t, const char* name) const {
    double v = t.item();
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite loss term '") + name + "' at step " + std::to_string(step_));
    return v;
  }

  TrainConfig cfg_;
  ScmNet net_;
  FeaturePyramid pyramid_;
  Adam opt_g_, opt_d_;
  std::int64_t step_ = 0;
};

// Runs training up to cfg.steps (resuming from the state's step), invoking
// `on_step` after every step.
inline void train(TrainState& state, const std::vector<synth::FigureSample>& data,
                  const std::function<void(const StepMetrics&)>& on_step = {}) {
  if (data.empty()) throw UsageError("training needs at least one sample");
  while (state.step() < state.config().steps) {
    Batch b = state.training_batch(data, state.step());
    StepMetrics m;
    try {
      m = state.train_step(b);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (step " + std::to_string(state.step()) + ")");
    }
    if (on_step) on_step(m);
  }
}

// ---------------------------------------------------------------- evaluation

inline constexpr std::int64_t kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Mean SSIM over all 8x8 windows (stride 1) and channels of two [C,H,W] images.
inline double ssim(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "ssim");
  if (a.ndim() != 3 || a.dim(1) < kSsimWindow || a.dim(2) < kSsimWindow)
    throw DimensionError("ssim expects [C,H,W] with H, W >= 8");
  const std::int64_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  const double inv = 1.0 / static_cast<double>(kSsimWindow * kSsimWindow);
  double total = 0;
  std::int64_t count = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    const double* x = a.ptr() + c * H * W;
    const double* y = b.ptr() + c * H * W;
    for (std::int64_t i = 0; i + kSsimWindow <= H; ++i)
      for (std::int64_t j = 0; j + kSsimWindow <= W; ++j) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::int64_t u = 0; u < kSsimWindow; ++u)
          for (std::int64_t v = 0; v < kSsimWindow; ++v) {
            const double p = x[(i + u) * W + j + v], q = y[(i + u) * W + j + v];
            sx += p;
            sy += q;
            sxx += p * p;
            syy += q * q;
            sxy += p * q;
          }
        const double mx = sx * inv, my = sy * inv;
        const double vx = sxx * inv - mx * mx, vy = syy * inv - my * my, cxy = sxy * inv - mx * my;
        const double num = (2.0 * mx * my + kSsimC1) * (2.0 * cxy + kSsimC2);
        const double den = (mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2);
        total += num / den;
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

inline double mse(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mse");
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

// Peak signal-to-noise ratio for images in [0,1]; infinite for identical images.
inline double psnr(const Tensor& a, const Tensor& b) {
  const double e = mse(a, b);
  return e == 0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / e);
}

inline double l1_distance(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "l1");
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

struct EvalMetrics {
  double l1 = 0, psnr = 0, ssim = 0;
  std::int64_t count = 0;
};

// Slice i of a batched tensor as its own tensor.
inline Tensor batch_item(const Tensor& t, std::int64_t i) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  const std::int64_t n = numel_of(s);
  return Tensor(s, std::vector<double>(t.ptr() + i * n, t.ptr() + (i + 1) * n));
}

// Self-reconstructions of data[idx...] (no gradient tracking).
inline Tensor reconstruct(const ScmNet& net, const std::vector<synth::FigureSample>& data,
                          const std::vector<std::int64_t>& idx) {
  Tape::NoGrad ng;
  Batch b = make_batch(data, idx);
  return net.forward(b.image, b.mask, b.pose).output;
}

inline EvalMetrics evaluate(const ScmNet& net, const std::vector<synth::FigureSample>& data,
                            std::int64_t batch = 4) {
  EvalMetrics m;
  for (std::int64_t start = 0; start < static_cast<std::int64_t>(data.size()); start += batch) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min<std::int64_t>(start + batch, static_cast<std::int64_t>(data.size()));
         ++i)
      idx.push_back(i);
    Tensor out = reconstruct(net, data, idx);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor o = batch_item(out, static_cast<std::int64_t>(k));
      const Tensor& ref = data[static_cast<std::size_t>(idx[k])].image;
      m.l1 += l1_distance(o, ref);
      m.psnr += psnr(o, ref);
      m.ssim += ssim(o, ref);
      ++m.count;
    }
  }
  if (m.count) {
    m.l1 /= static_cast<double>(m.count);
    m.psnr /= static_cast<double>(m.count);
    m.ssim /= static_cast<double>(m.count);
  }
  return m;
}

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'M', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

namespace detail {

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IoError("truncated checkpoint");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v = synth::detail::get_le<T>(bytes.data() + pos);
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
};

inline void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  synth::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

}  // namespace detail

inline std::vector<NamedTensor> checkpoint_tensors(TrainState& st) {
  std::vector<NamedTensor> out;
  ParamSet all = st.net().all_params();
  for (auto& [name, t] : all.entries())
    out.push_back({"param/" + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  auto moments = [&](const char* group, Adam& opt, ParamSet& ps) {
    for (auto& [name, t] : ps.entries()) {
      auto it = opt.moments().find(name);
      std::vector<double> m(static_cast<std::size_t>(t.numel()), 0.0), v = m;
      if (it != opt.moments().end() && !it->second.m.empty()) {
        m = it->second.m;
        v = it->second.v;
      }
      out.push_back({std::string("adam_m/") + group + name, t.shape(), m});
      out.push_back({std::string("adam_v/") + group + name, t.shape(), v});
    }
  };
  moments("G.", st.opt_g(), st.net().generator_params());
  moments("D.", st.opt_d(), st.net().discriminator_params());
  return out;
}

inline std::vector<std::uint8_t> encode_checkpoint(TrainState& st) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  using synth::detail::put_le;
  put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_str(out, config_to_string(st.config()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(st.step()));
  put_le<std::uint64_t>(out, st.pyramid().seed());
  auto tensors = checkpoint_tensors(st);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (auto& t : tensors) {
    detail::put_str(out, t.name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_le<std::int64_t>(out, d);
    for (double v : t.data) put_le<double>(out, v);
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, TrainState& st) {
  scm::detail::write_bytes(path, encode_checkpoint(st));
}

inline std::unique_ptr<TrainState> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw IoError("not a checkpoint (bad magic)");
  detail::Reader r{bytes, 4};
  if (r.get<std::uint16_t>() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  const std::string cfg_text = r.str(r.get<std::uint32_t>());
  TrainConfig cfg;
  try {
    cfg = parse_config(cfg_text);
  } catch (const ConfigError& e) {
    throw IoError(std::string("corrupt checkpoint config: ") + e.what());
  }
  const auto step = r.get<std::uint64_t>();
  cfg.pyramid_seed = r.get<std::uint64_t>();
  auto st = std::make_unique<TrainState>(cfg);
  st->set_step(static_cast<std::int64_t>(step));

  std::map<std::string, NamedTensor> table;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get<std::uint32_t>());
    const auto nd = r.get<std::uint32_t>();
    if (nd > 8) throw IoError("corrupt checkpoint tensor rank");
    for (std::uint32_t d = 0; d < nd; ++d) {
      auto v = r.get<std::int64_t>();
      if (v < 0 || v > (1 << 24)) throw IoError("corrupt checkpoint tensor shape");
      t.shape.push_back(v);
    }
    const auto n = static_cast<std::size_t>(numel_of(t.shape));
    r.need(n * 8);
    t.data.resize(n);
    for (auto& v : t.data) v = r.get<double>();
    table[t.name] = std::move(t);
  }
  if (r.pos != bytes.size()) throw IoError("trailing bytes in checkpoint");

  auto fetch = [&](const std::string& name, const Shape& shape) -> const std::vector<double>& {
    auto it = table.find(name);
    if (it == table.end()) throw IoError("checkpoint is missing tensor " + name);
    if (it->second.shape != shape) throw IoError("checkpoint shape mismatch for " + name);
    return it->second.data;
  };
  ParamSet all = st->net().all_params();
  for (auto& [name, t] : all.entries()) {
    auto& d = fetch("param/" + name, t.shape());
    std::copy(d.begin(), d.end(), t.mutable_data().begin());
  }
  auto moments = [&](const char* group, Adam& opt, ParamSet& ps) {
    for (auto& [name, t] : ps.entries()) {
      auto& mm = opt.moments()[name];
      mm.m = fetch(std::string("adam_m/") + group + name, t.shape());
      mm.v = fetch(std::string("adam_v/") + group + name, t.shape());
    }
  };
  moments("G.", st->opt_g(), st->net().generator_params());
  moments("D.", st->opt_d(), st->net().discriminator_params());
  return st;
}

inline std::unique_ptr<TrainState> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace scm
