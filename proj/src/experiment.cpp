#include "modelzoo/experiment.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>

#include "json.hpp"
#include "modelzoo/bridges.hpp"
#include "modelzoo/config.hpp"
#include "modelzoo/datasets.hpp"
#include "modelzoo/descriptive.hpp"
#include "modelzoo/discriminative.hpp"
#include "modelzoo/error.hpp"
#include "modelzoo/generative.hpp"
#include "modelzoo/io.hpp"
#include "modelzoo/oracle.hpp"

namespace modelzoo {

namespace {

namespace fs = std::filesystem;
using Checkpoint = std::map<std::string, Tensor>;
using Metrics = std::vector<std::pair<std::string, double>>;

// Where a failure happened, for the error line.
struct Where {
  std::string module = "cli";
  std::string section = "experiment";
};

struct Run {
  std::uint64_t seed = 0;
  fs::path out;
  std::size_t eval_every = 100;
  std::size_t samples = 1000;

  Rng stream(std::string_view name) const { return Rng(seed).split(name); }
};

std::string num(double v) { return format_number(v); }

// Re-raises a parse failure from a library parser against the offending key.
template <typename F>
auto keyed(const std::string& section, const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigKeyError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigKeyError(section, key, e.what());
  }
}

int positive_int(const Config& cfg, const std::string& section, const std::string& key, long fallback) {
  const long v = cfg.integer(section, key, fallback);
  if (v <= 0 || v > 100000000) throw ConfigKeyError(section, key, "must be a positive integer");
  return static_cast<int>(v);
}

double positive_real(const Config& cfg, const std::string& section, const std::string& key, double fallback) {
  const double v = cfg.real(section, key, fallback);
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigKeyError(section, key, "must be positive");
  return v;
}

LangevinConfig read_langevin(const Config& cfg, const std::string& section, LangevinConfig lang) {
  lang.step_size = positive_real(cfg, section, "step_size", lang.step_size);
  lang.steps = positive_int(cfg, section, "steps", lang.steps);
  lang.mh_correct = cfg.flag(section, "mh_correct", lang.mh_correct);
  lang.noise_scale = cfg.real(section, "noise_scale", lang.noise_scale);
  if (lang.noise_scale < 0.0) throw ConfigKeyError(section, "noise_scale", "must be nonnegative");
  return lang;
}

OptimizerKind read_optimizer(const Config& cfg, OptimizerKind fallback) {
  if (!cfg.has("training", "optimizer")) return fallback;
  const auto name = cfg.str("training", "optimizer");
  return keyed("training", "optimizer", [&] { return parse_optimizer(name); });
}

Activation read_activation(const Config& cfg, Activation fallback) {
  if (!cfg.has("architecture", "activation")) return fallback;
  const auto name = cfg.str("architecture", "activation");
  return keyed("architecture", "activation", [&] { return parse_activation(name); });
}

std::size_t latent_dim(const Config& cfg, std::size_t fallback) {
  const auto d = cfg.count("architecture", "latent_dim", fallback);
  if (d == 0) throw ConfigKeyError("architecture", "latent_dim", "must be positive");
  return d;
}

// --- conversions ---------------------------------------------------------------

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return t;
}

Tensor from_eigen_vec(const Eigen::VectorXd& v) { return Tensor::vector({v.data(), v.data() + v.size()}); }

Eigen::MatrixXd to_eigen(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("checkpoint", "expected a matrix, got " + shape_string(t.shape()));
  const auto r = static_cast<Eigen::Index>(t.shape()[0]), c = static_cast<Eigen::Index>(t.shape()[1]);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = t[static_cast<std::size_t>(i * c + j)];
  return m;
}

Eigen::VectorXd to_eigen_vec(const Tensor& t) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v(static_cast<Eigen::Index>(i)) = t[i];
  return v;
}

const Tensor& need(const Checkpoint& ck, const std::string& name) {
  auto it = ck.find(name);
  if (it == ck.end()) throw ShapeError("checkpoint", "missing tensor '" + name + "' (refit with this config)");
  return it->second;
}

void restore_net(Network& net, const Checkpoint& ck, const std::string& name) {
  const Tensor& flat = need(ck, name);
  if (flat.size() != net.param_count())
    throw ShapeError("checkpoint", "'" + name + "' does not match the configured architecture");
  net.set_flat_params(flat);
}

std::size_t example_dim(const Dataset& ds) { return ds.examples.front().size(); }

std::vector<Tensor> truth_centers(const Dataset& ds) {
  std::vector<Tensor> out;
  auto it = ds.truth.find("centers");
  if (it == ds.truth.end()) return out;
  const Tensor& c = it->second;
  for (std::size_t j = 0; j < c.shape()[0]; ++j) out.push_back(Tensor::vector({c.at({j, 0}), c.at({j, 1})}));
  return out;
}

// Modes holding at least 5% of the samples.
std::size_t modes_covered(std::span<const Tensor> samples, std::span<const Tensor> centers) {
  const auto f = nearest_center_fractions(samples, centers);
  return static_cast<std::size_t>(std::count_if(f.begin(), f.end(), [](double v) { return v >= 0.05; }));
}

std::vector<std::size_t> two_class_check(const Dataset& ds, std::size_t max_classes, const char* family) {
  if (ds.labels.empty()) throw ConfigKeyError("dataset", "name", std::string(family) + " needs a labeled dataset");
  const auto k = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  if (k > max_classes)
    throw ConfigKeyError("dataset", "k", std::string(family) + " handles at most " + std::to_string(max_classes) +
                                             " classes, data has " + std::to_string(k));
  return ds.labels;
}

// --- families --------------------------------------------------------------------

class Family {
 public:
  virtual ~Family() = default;
  virtual const char* module() const = 0;
  virtual bool images() const { return false; }
  // Untrained models sized to the data. Every verb starts here.
  virtual void build(const Dataset& ds, Rng& rng) = 0;
  virtual void fit(const Dataset& ds, const Run& run) = 0;
  virtual Checkpoint save() const = 0;
  virtual void restore(const Checkpoint& ck) = 0;
  virtual bool can_sample() const { return false; }
  virtual std::vector<Tensor> sample(std::size_t, Rng&) const { return {}; }
  virtual Metrics eval(const Dataset& ds, const Run& run) const = 0;
};

class LogisticFamily : public Family {
 public:
  explicit LogisticFamily(const Config& cfg) {
    lc_.max_iters = positive_int(cfg, "training", "iterations", lc_.max_iters);
    lc_.tolerance = positive_real(cfg, "training", "tolerance", lc_.tolerance);
    lc_.ridge = cfg.real("training", "ridge", lc_.ridge);
    if (lc_.ridge < 0.0) throw ConfigKeyError("training", "ridge", "must be nonnegative");
  }
  const char* module() const override { return "discriminative"; }
  void build(const Dataset& ds, Rng&) override {
    two_class_check(ds, 2, "logistic");
    fit_.theta = Tensor({example_dim(ds)});
  }
  void fit(const Dataset& ds, const Run& run) override {
    const auto y = signs(ds);
    fit_ = fit_logistic(ds.examples, y, lc_);
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "log_likelihood", "accuracy"});
    for (std::size_t i = 0; i < fit_.log_likelihood.size(); ++i)
      csv.row({std::to_string(i + 1), num(fit_.log_likelihood[i]), ""});
    csv.row({"final", num(fit_.log_likelihood.empty() ? 0.0 : fit_.log_likelihood.back()), num(accuracy(ds))});
  }
  Checkpoint save() const override { return {{"theta", fit_.theta}, {"b", Tensor::scalar(fit_.b)}}; }
  void restore(const Checkpoint& ck) override {
    fit_.theta = need(ck, "theta");
    fit_.b = need(ck, "b").item();
  }
  Metrics eval(const Dataset& ds, const Run&) const override { return {{"accuracy", accuracy(ds)}}; }

 private:
  static std::vector<int> signs(const Dataset& ds) {
    std::vector<int> y;
    for (auto l : ds.labels) y.push_back(l == 0 ? -1 : 1);
    return y;
  }
  double accuracy(const Dataset& ds) const {
    const auto y = signs(ds);
    double hits = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) hits += (logistic_score(fit_, ds.examples[i]) > 0.0) == (y[i] > 0);
    return hits / static_cast<double>(y.size());
  }
  LogisticConfig lc_;
  LogisticFit fit_;
};

class SoftmaxFamily : public Family {
 public:
  explicit SoftmaxFamily(const Config& cfg) {
    hidden_ = cfg.counts("architecture", "hidden", {32});
    act_ = read_activation(cfg, Activation::kTanh);
    tc_.epochs = positive_int(cfg, "training", "iterations", tc_.epochs);
    tc_.batch_size = cfg.count("training", "batch_size", tc_.batch_size);
    tc_.lr = positive_real(cfg, "training", "lr", tc_.lr);
    tc_.optimizer = read_optimizer(cfg, tc_.optimizer);
  }
  const char* module() const override { return "discriminative"; }
  void build(const Dataset& ds, Rng& rng) override {
    const auto labels = two_class_check(ds, 1000, "softmax");
    fit_.classes = *std::max_element(labels.begin(), labels.end()) + 1;
    fit_.net = std::make_shared<Network>(make_mlp({example_dim(ds), hidden_, fit_.classes, act_}, rng));
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "loss", "accuracy"});
    fit_ = fit_softmax_net(ds.examples, ds.labels, *fit_.net, tc_, rng, [&](const SoftmaxEpoch& e) {
      csv.row({std::to_string(e.epoch), num(e.loss), num(e.accuracy)});
    });
    const auto& last = fit_.log.back();
    csv.row({"final", num(last.loss), num(classifier_accuracy(fit_.classifier(), ds.examples, ds.labels))});
  }
  Checkpoint save() const override { return {{"net", fit_.net->flat_params()}}; }
  void restore(const Checkpoint& ck) override { restore_net(*fit_.net, ck, "net"); }
  Metrics eval(const Dataset& ds, const Run&) const override {
    return {{"accuracy", classifier_accuracy(fit_.classifier(), ds.examples, ds.labels)}};
  }

 private:
  std::vector<std::size_t> hidden_;
  Activation act_;
  SoftmaxTrainConfig tc_;
  SoftmaxFit fit_;
};

// Exact maximum likelihood on the binary cube {0,1}^p with raw moment features.
class LinearDescriptiveFamily : public Family {
 public:
  explicit LinearDescriptiveFamily(const Config& cfg) {
    order_ = static_cast<int>(cfg.integer("model", "order", 2));
    if (order_ < 1 || order_ > 4) throw ConfigKeyError("model", "order", "must be in 1..4");
    ec_.max_iters = positive_int(cfg, "training", "iterations", ec_.max_iters);
    ec_.tolerance = positive_real(cfg, "training", "tolerance", ec_.tolerance);
  }
  const char* module() const override { return "descriptive"; }
  void build(const Dataset& ds, Rng&) override {
    const auto p = example_dim(ds);
    if (p > 16) throw ConfigKeyError("dataset", "p", "linear-descriptive enumerates {0,1}^p and needs p <= 16");
    for (const auto& x : ds.examples)
      for (double v : x.values())
        if (v != 0.0 && v != 1.0) throw ShapeError("linear-descriptive", "data must be binary (0/1)");
    domain_ = Domain::binary_cube(p);
    model_.map = FeatureMap::raw_moments(p, order_);
    model_.reference = Reference::uniform(0.0, 1.0);
    model_.theta = Tensor({model_.map.dim()});
  }
  void fit(const Dataset& ds, const Run& run) override {
    auto f = fit_linear_exact(ds.examples, model_.map, *domain_, model_.reference, ec_);
    model_ = f.model;
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "log_likelihood", "moment_gap"});
    for (std::size_t i = 0; i < f.log_likelihood.size(); ++i)
      csv.row({std::to_string(i + 1), num(f.log_likelihood[i]), ""});
    csv.row({"final", num(mean_log_likelihood(ds)), num(f.moment_gap)});
  }
  Checkpoint save() const override { return {{"theta", model_.theta}}; }
  void restore(const Checkpoint& ck) override {
    model_.theta = need(ck, "theta");
    if (model_.theta.size() != model_.map.dim()) throw ShapeError("checkpoint", "theta does not match the features");
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    const auto mass = normalized_log_mass(model_log_table(model_, *domain_), *domain_);
    std::vector<Tensor> out;
    for (auto s : sample_table(mass, n, rng)) out.push_back(domain_->state(s));
    return out;
  }
  Metrics eval(const Dataset& ds, const Run&) const override { return {{"log_likelihood", mean_log_likelihood(ds)}}; }

 private:
  double mean_log_likelihood(const Dataset& ds) const {
    const double log_z = brute_force_logz(model_log_table(model_, *domain_), *domain_);
    double acc = 0.0;
    for (const auto& x : ds.examples) acc += model_.unnormalized_log_density(x) - log_z;
    return acc / static_cast<double>(ds.examples.size());
  }
  int order_ = 2;
  ExactFitConfig ec_;
  std::optional<Domain> domain_;
  LinearDescriptiveModel model_{Tensor(), FeatureMap::raw_moments(1, 1), Reference::gaussian(1.0), std::nullopt};
};

// Shared pieces of the families with a deep energy model.
struct EbmSpec {
  std::vector<std::size_t> hidden;
  Activation act = Activation::kTanh;
  double sigma2 = 1.0;

  static EbmSpec read(const Config& cfg, double default_sigma2) {
    EbmSpec s;
    s.hidden = cfg.counts("architecture", "hidden", {32, 32});
    s.act = read_activation(cfg, Activation::kTanh);
    s.sigma2 = positive_real(cfg, "model", "sigma2", default_sigma2);
    return s;
  }
  DeepEnergyModel make(std::size_t p, Rng& rng) const {
    return {make_mlp({p, hidden, 1, act}, rng), sigma2};
  }
};

struct GeneratorSpec {
  std::size_t latent = 2;
  std::vector<std::size_t> hidden;
  std::vector<std::size_t> encoder_hidden;
  Activation act = Activation::kTanh;
  double sigma2 = 0.25;

  static GeneratorSpec read(const Config& cfg, const std::string& sigma2_key, double default_sigma2,
                            const std::vector<std::size_t>& default_hidden, bool with_encoder) {
    GeneratorSpec s;
    s.latent = latent_dim(cfg, 2);
    s.hidden = cfg.counts("architecture", "generator_hidden", default_hidden);
    if (with_encoder) s.encoder_hidden = cfg.counts("architecture", "encoder_hidden", s.hidden);
    s.act = read_activation(cfg, Activation::kTanh);
    s.sigma2 = positive_real(cfg, "model", sigma2_key, default_sigma2);
    return s;
  }
  GeneratorModel make(std::size_t p, Rng& rng) const { return mlp_generator(latent, hidden, p, rng, sigma2, act); }
  InferenceModel make_encoder(std::size_t p, Rng& rng) const {
    return mlp_encoder(p, encoder_hidden, latent, rng, act);
  }
};

class DeepEbmFamily : public Family {
 public:
  explicit DeepEbmFamily(const Config& cfg) : spec_(EbmSpec::read(cfg, 1.0)) {
    const auto mode = cfg.str("model", "init", "persistent");
    init_ = keyed("model", "init", [&] { return parse_init_mode(mode); });
    if (init_ == InitMode::kGeneratorInit)
      throw ConfigKeyError("model", "init", "generator-init needs a generator; use the coopnets family");
    tc_.iterations = positive_int(cfg, "training", "iterations", tc_.iterations);
    tc_.batch_size = cfg.count("training", "batch_size", tc_.batch_size);
    tc_.synth_count = cfg.count("training", "synth", tc_.synth_count);
    tc_.lr = positive_real(cfg, "training", "lr", tc_.lr);
    tc_.decay_every = cfg.integer("training", "decay_every", tc_.decay_every);
    tc_.optimizer = read_optimizer(cfg, tc_.optimizer);
    tc_.batched = true;
    lang_ = read_langevin(cfg, "sampler", lang_);
  }
  const char* module() const override { return "descriptive"; }
  void build(const Dataset& ds, Rng& rng) override {
    p_ = example_dim(ds);
    model_ = spec_.make(p_, rng);
    centers_ = truth_centers(ds);
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    std::vector<std::string> header{"iteration", "value", "mean_u_data", "mean_u_synth", "update_norm", "diverged"};
    if (!centers_.empty()) header.push_back("modes_covered");
    CsvWriter csv(run.out / "metrics.csv", header);
    fit_deep_ebm(model_, ds.examples, init_, lang_, tc_, rng, [&](const EbmIteration& it, std::span<const Tensor> synth) {
      std::vector<std::string> row{std::to_string(it.iteration), num(it.value), num(it.mean_u_data),
                                   num(it.mean_u_synth), num(it.update_norm), std::to_string(it.diverged)};
      if (!centers_.empty()) row.push_back(std::to_string(modes_covered(synth, centers_)));
      csv.row(row);
    });
  }
  Checkpoint save() const override { return {{"score", model_.score.flat_params()}}; }
  void restore(const Checkpoint& ck) override { restore_net(model_.score, ck, "score"); }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    std::vector<Tensor> inits;
    for (std::size_t i = 0; i < n; ++i) inits.push_back(rng.normal_tensor({p_}, std::sqrt(model_.sigma2)));
    return ebm_synthesize(model_, std::move(inits), lang_, true, rng);
  }
  Metrics eval(const Dataset& ds, const Run& run) const override {
    Rng rng = run.stream("eval");
    const auto synth = sample(ds.examples.size(), rng);
    Metrics m{{"mean_u_data", mean_energy(model_, ds.examples, true)}, {"mean_u_synth", mean_energy(model_, synth, true)}};
    if (!centers_.empty()) m.emplace_back("modes_covered", static_cast<double>(modes_covered(synth, centers_)));
    return m;
  }

 private:
  EbmSpec spec_;
  InitMode init_ = InitMode::kPersistent;
  EbmTrainConfig tc_;
  LangevinConfig lang_;
  std::size_t p_ = 0;
  DeepEnergyModel model_;
  std::vector<Tensor> centers_;
};

class MultigridFamily : public Family {
 public:
  explicit MultigridFamily(const Config& cfg) {
    mc_.grids = cfg.counts("architecture", "grids", mc_.grids);
    keyed("architecture", "grids", [&] { check_grids(mc_.grids); return 0; });
    mc_.base_channels = cfg.count("architecture", "base_channels", mc_.base_channels);
    mc_.sigma2 = positive_real(cfg, "model", "sigma2", mc_.sigma2);
    mc_.iterations = positive_int(cfg, "training", "iterations", mc_.iterations);
    mc_.batch_size = cfg.count("training", "batch_size", mc_.batch_size);
    mc_.synth_count = cfg.count("training", "synth", mc_.synth_count);
    mc_.lr = positive_real(cfg, "training", "lr", mc_.lr);
    mc_.optimizer = read_optimizer(cfg, mc_.optimizer);
    lang_ = read_langevin(cfg, "sampler", LangevinConfig::multigrid_default());
  }
  const char* module() const override { return "descriptive"; }
  bool images() const override { return true; }
  void build(const Dataset& ds, Rng& rng) override {
    const auto& s = ds.examples.front().shape();
    if (s.size() != 3) throw ConfigKeyError("model", "family", "multigrid needs an image dataset");
    if (s[0] != mc_.grids.back())
      throw ConfigKeyError("architecture", "grids", "finest grid must equal the image size " + std::to_string(s[0]));
    pyr_ = make_pyramid_models(mc_, s[2], rng);
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    const auto log = fit_multigrid(pyr_, ds.examples, mc_, lang_, rng);
    std::vector<std::string> header{"iteration"};
    for (std::size_t g = 1; g < pyr_.grids.size(); ++g) {
      header.push_back("discrepancy_" + std::to_string(pyr_.grids[g]));
      header.push_back("value_" + std::to_string(pyr_.grids[g]));
    }
    CsvWriter csv(run.out / "metrics.csv", header);
    for (const auto& it : log) {
      std::vector<std::string> row{std::to_string(it.iteration)};
      for (std::size_t g = 0; g < it.discrepancy.size(); ++g) {
        row.push_back(num(it.discrepancy[g]));
        row.push_back(num(it.value[g]));
      }
      csv.row(row);
    }
  }
  Checkpoint save() const override {
    Checkpoint ck{{"seed_histogram", Tensor::vector(pyr_.seed_histogram)}};
    for (std::size_t g = 0; g < pyr_.models.size(); ++g)
      ck["score_" + std::to_string(pyr_.grids[g + 1])] = pyr_.models[g].score.flat_params();
    return ck;
  }
  void restore(const Checkpoint& ck) override {
    const auto hist = need(ck, "seed_histogram").values();
    pyr_.seed_histogram.assign(hist.begin(), hist.end());
    for (std::size_t g = 0; g < pyr_.models.size(); ++g)
      restore_net(pyr_.models[g].score, ck, "score_" + std::to_string(pyr_.grids[g + 1]));
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    return sample_multigrid_levels(pyr_, n, lang_, rng).back();
  }
  Metrics eval(const Dataset&, const Run& run) const override {
    // Coarse block means of synthesized images against the 1x1 histogram.
    Rng rng = run.stream("eval");
    std::vector<double> means;
    for (const auto& img : sample(run.samples, rng))
      means.push_back(block_average(img, 1).values()[0]);
    const auto h = unit_histogram(means, pyr_.seed_bins);
    double tv = 0.0;
    for (std::size_t b = 0; b < h.size(); ++b) tv += 0.5 * std::abs(h[b] - pyr_.seed_histogram[b]);
    return {{"seed_tv", tv}};
  }

 private:
  MultigridConfig mc_;
  LangevinConfig lang_;
  GridPyramid pyr_;
};

class FactorAnalysisFamily : public Family {
 public:
  explicit FactorAnalysisFamily(const Config& cfg) {
    d_ = latent_dim(cfg, 2);
    ec_.max_iters = positive_int(cfg, "training", "iterations", ec_.max_iters);
    ec_.tolerance = positive_real(cfg, "training", "tolerance", ec_.tolerance);
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng&) override {
    const auto p = example_dim(ds);
    if (d_ >= p) throw ConfigKeyError("architecture", "latent_dim", "must be below the data dimension");
    model_.W = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(d_));
    mean_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (auto it = ds.truth.find("W"); it != ds.truth.end() && it->second.shape()[0] == p) truth_ = to_eigen(it->second);
  }
  void fit(const Dataset& ds, const Run& run) override {
    mean_ = to_matrix(ds.examples).colwise().mean().transpose();
    Rng rng = run.stream("fit");
    const auto f = fit_factor_analysis(centered(ds), d_, ec_, rng);
    model_ = f.model;
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "log_likelihood", "sigma2", "angle_deg"});
    for (std::size_t i = 0; i < f.log_likelihood.size(); ++i)
      csv.row({std::to_string(i + 1), num(f.log_likelihood[i]), "", ""});
    csv.row({"final", num(f.log_likelihood.back()), num(model_.sigma2), num(angle())});
  }
  Checkpoint save() const override {
    return {{"W", from_eigen(model_.W)}, {"sigma2", Tensor::scalar(model_.sigma2)}, {"mean", from_eigen_vec(mean_)}};
  }
  void restore(const Checkpoint& ck) override {
    model_.W = to_eigen(need(ck, "W"));
    model_.sigma2 = need(ck, "sigma2").item();
    mean_ = to_eigen_vec(need(ck, "mean"));
    model_.validate();
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::VectorXd h(model_.W.cols()), e(model_.W.rows());
      for (auto& v : h) v = rng.normal();
      for (auto& v : e) v = rng.normal();
      out.push_back(from_eigen_vec(mean_ + model_.W * h + std::sqrt(model_.sigma2) * e));
    }
    return out;
  }
  Metrics eval(const Dataset& ds, const Run&) const override {
    return {{"log_likelihood", fa_log_likelihood(model_, centered(ds))}, {"angle_deg", angle()}};
  }

 private:
  std::vector<Tensor> centered(const Dataset& ds) const {
    const Tensor m = from_eigen_vec(mean_);
    std::vector<Tensor> out;
    for (const auto& x : ds.examples) out.push_back(x - m);
    return out;
  }
  double angle() const {
    if (truth_.size() == 0) return std::nan("");
    return principal_angle_deg(model_.W, truth_);
  }
  std::size_t d_ = 2;
  EmConfig ec_;
  FactorAnalysisModel model_;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd truth_;
};

class SparseCodingFamily : public Family {
 public:
  explicit SparseCodingFamily(const Config& cfg) {
    d_ = latent_dim(cfg, 24);
    lambda_ = positive_real(cfg, "model", "lambda", 0.1);
    tc_.epochs = positive_int(cfg, "training", "iterations", tc_.epochs);
    tc_.infer_iters = positive_int(cfg, "training", "infer_iters", tc_.infer_iters);
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng&) override {
    coder_.W = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(example_dim(ds)), static_cast<Eigen::Index>(d_));
    coder_.lambda = lambda_;
    if (auto it = ds.truth.find("dictionary"); it != ds.truth.end() && it->second.shape()[0] == example_dim(ds))
      truth_ = to_eigen(it->second);
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    const auto f = fit_sparse_coding(ds.examples, d_, lambda_, tc_, rng);
    coder_ = f.coder;
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "objective", "recovery"});
    for (std::size_t i = 0; i < f.objective.size(); ++i) csv.row({std::to_string(i + 1), num(f.objective[i]), ""});
    csv.row({"final", num(f.objective.back()), num(recovery())});
  }
  Checkpoint save() const override { return {{"W", from_eigen(coder_.W)}}; }
  void restore(const Checkpoint& ck) override {
    coder_.W = to_eigen(need(ck, "W"));
    coder_.validate();
  }
  Metrics eval(const Dataset& ds, const Run&) const override {
    double obj = 0.0;
    for (const auto& x : ds.examples) {
      const Eigen::VectorXd v = to_eigen_vec(x);
      obj += coder_.objective(v, sparse_infer(coder_, v, tc_.infer_iters));
    }
    return {{"mean_objective", obj / static_cast<double>(ds.examples.size())}, {"recovery", recovery()}};
  }

 private:
  // Worst true atom's best |cosine| against the learned dictionary.
  double recovery() const {
    if (truth_.size() == 0) return std::nan("");
    double worst = 1.0;
    for (Eigen::Index k = 0; k < truth_.cols(); ++k) {
      const Eigen::VectorXd t = truth_.col(k).normalized();
      worst = std::min(worst, (coder_.W.transpose() * t).cwiseAbs().maxCoeff());
    }
    return worst;
  }
  std::size_t d_ = 24;
  double lambda_ = 0.1;
  SparseTrainConfig tc_;
  SparseCoder coder_;
  Eigen::MatrixXd truth_;
};

class IcaFamily : public Family {
 public:
  explicit IcaFamily(const Config& cfg) {
    ic_.iters = positive_int(cfg, "training", "iterations", ic_.iters);
    ic_.lr = positive_real(cfg, "training", "lr", ic_.lr);
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng&) override {
    const auto p = static_cast<Eigen::Index>(example_dim(ds));
    A_ = Eigen::MatrixXd::Identity(p, p);
  }
  void fit(const Dataset& ds, const Run& run) override {
    const auto f = fit_ica(ds.examples, ic_);
    A_ = f.A;
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "log_likelihood"});
    for (std::size_t i = 0; i < f.log_likelihood.size(); ++i)
      csv.row({std::to_string(i + 1), num(f.log_likelihood[i])});
    csv.row({"final", num(f.log_likelihood.back())});
  }
  Checkpoint save() const override { return {{"A", from_eigen(A_)}}; }
  void restore(const Checkpoint& ck) override { A_ = to_eigen(need(ck, "A")); }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    const Eigen::MatrixXd mix = A_.inverse();
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::VectorXd s(A_.rows());
      for (auto& v : s) {
        const double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
        v = std::log(u / (1.0 - u));
      }
      out.push_back(from_eigen_vec(mix * s));
    }
    return out;
  }
  Metrics eval(const Dataset& ds, const Run&) const override {
    return {{"log_likelihood", ica_log_likelihood(A_, to_matrix(ds.examples).transpose())}};
  }

 private:
  IcaConfig ic_;
  Eigen::MatrixXd A_;
};

// NMF and masked matrix factorization share the layout: columns are examples.
// NMF factorizes (x + 1) / 2, which maps the [-1, 1] signal range onto
// nonnegative intensities.
class FactorizeFamily : public Family {
 public:
  FactorizeFamily(const Config& cfg, bool masked) : masked_(masked) {
    fc_.rank = latent_dim(cfg, 2);
    fc_.iters = positive_int(cfg, "training", "iterations", fc_.iters);
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng&) override {
    if (masked_ && ds.masks.empty()) throw ConfigKeyError("dataset", "name", "masked-mf needs a dataset with masks");
    X_ = to_matrix(ds.examples).transpose();
    if (!masked_) X_ = (X_.array() + 1.0) / 2.0;
    if (masked_) mask_ = to_matrix(ds.masks).transpose();
    f_.W = Eigen::MatrixXd::Zero(X_.rows(), static_cast<Eigen::Index>(fc_.rank));
    f_.H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(fc_.rank), X_.cols());
  }
  void fit(const Dataset&, const Run& run) override {
    Rng rng = run.stream("fit");
    f_ = masked_ ? fit_masked_mf(X_, mask_, fc_, rng) : fit_nmf(X_, fc_, rng);
    std::vector<std::string> header{"iteration", "objective"};
    if (masked_) header.push_back("heldout_rmse");
    CsvWriter csv(run.out / "metrics.csv", header);
    for (std::size_t i = 0; i < f_.objective.size(); ++i) {
      std::vector<std::string> row{std::to_string(i + 1), num(f_.objective[i])};
      if (masked_) row.emplace_back();
      csv.row(row);
    }
    std::vector<std::string> row{"final", num(f_.objective.back())};
    if (masked_) row.push_back(num(rmse(false)));
    csv.row(row);
  }
  Checkpoint save() const override { return {{"W", from_eigen(f_.W)}, {"H", from_eigen(f_.H)}}; }
  void restore(const Checkpoint& ck) override {
    f_.W = to_eigen(need(ck, "W"));
    f_.H = to_eigen(need(ck, "H"));
    if (f_.W.rows() != X_.rows() || f_.H.cols() != X_.cols()) throw ShapeError("checkpoint", "factors do not match the data");
  }
  Metrics eval(const Dataset&, const Run&) const override {
    if (!masked_) return {{"rmse", rmse(true)}};
    return {{"observed_rmse", rmse(true)}, {"heldout_rmse", rmse(false)}};
  }

 private:
  double rmse(bool observed) const {
    const Eigen::MatrixXd R = X_ - f_.W * f_.H;
    double acc = 0.0, count = 0.0;
    for (Eigen::Index i = 0; i < R.rows(); ++i)
      for (Eigen::Index j = 0; j < R.cols(); ++j) {
        if (masked_ && (mask_(i, j) != 0.0) != observed) continue;
        acc += R(i, j) * R(i, j);
        count += 1.0;
      }
    return count > 0.0 ? std::sqrt(acc / count) : std::nan("");
  }
  bool masked_;
  FactorizeConfig fc_;
  Eigen::MatrixXd X_, mask_;
  Factorization f_;
};

class RbmFamily : public Family {
 public:
  explicit RbmFamily(const Config& cfg) {
    d_ = latent_dim(cfg, 4);
    const auto method = cfg.str("model", "method", "exact");
    if (method == "exact") rc_.method = RbmFitMethod::kExact;
    else if (method == "cd") rc_.method = RbmFitMethod::kCd;
    else throw ConfigKeyError("model", "method", "expected exact or cd");
    rc_.k = positive_int(cfg, "model", "cd_steps", rc_.k);
    sweeps_ = positive_int(cfg, "model", "gibbs_sweeps", 1000);
    rc_.iters = positive_int(cfg, "training", "iterations", rc_.iters);
    rc_.lr = positive_real(cfg, "training", "lr", rc_.lr);
    rc_.tolerance = positive_real(cfg, "training", "tolerance", rc_.tolerance);
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng& rng) override {
    const auto p = example_dim(ds);
    if (rc_.method == RbmFitMethod::kExact && std::min(p, d_) > kRbmExactBound)
      throw ConfigKeyError("model", "method", "exact fitting needs p or latent_dim <= " + std::to_string(kRbmExactBound));
    model_ = RbmModel::zeros(p, d_);
    // Small random weights break the symmetry between hidden units.
    for (Eigen::Index i = 0; i < model_.W.size(); ++i) model_.W.data()[i] = 0.1 * rng.normal();
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    const Eigen::MatrixXd X = to_matrix(ds.examples);
    const auto f = fit_rbm(X, model_, rc_, rng);
    model_ = f.model;
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "grad_norm", "log_likelihood"});
    for (std::size_t i = 0; i < f.grad_norm.size(); ++i) csv.row({std::to_string(i + 1), num(f.grad_norm[i]), ""});
    csv.row({"final", f.grad_norm.empty() ? "" : num(f.grad_norm.back()), num(log_likelihood(X))});
  }
  Checkpoint save() const override {
    return {{"W", from_eigen(model_.W)}, {"b", from_eigen_vec(model_.b)}, {"c", from_eigen_vec(model_.c)}};
  }
  void restore(const Checkpoint& ck) override {
    model_.W = to_eigen(need(ck, "W"));
    model_.b = to_eigen_vec(need(ck, "b"));
    model_.c = to_eigen_vec(need(ck, "c"));
    model_.validate();
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
      Rng chain = rng.split(i);
      Eigen::VectorXd x(model_.W.rows());
      for (auto& v : x) v = chain.bernoulli(0.5) ? 1.0 : 0.0;
      for (int s = 0; s < sweeps_; ++s) x = rbm_gibbs_step(model_, x, chain).x;
      out.push_back(from_eigen_vec(x));
    }
    return out;
  }
  Metrics eval(const Dataset& ds, const Run&) const override {
    return {{"log_likelihood", log_likelihood(to_matrix(ds.examples))}};
  }

 private:
  double log_likelihood(const Eigen::MatrixXd& X) const {
    if (std::min(model_.p(), model_.d()) > kRbmExactBound) return std::nan("");
    return rbm_log_likelihood(model_, X);
  }
  std::size_t d_ = 4;
  int sweeps_ = 1000;
  RbmFitConfig rc_;
  RbmModel model_;
};

class AbpFamily : public Family {
 public:
  explicit AbpFamily(const Config& cfg) : spec_(GeneratorSpec::read(cfg, "sigma2", 0.25, {32, 32}, false)) {
    ac_.epochs = positive_int(cfg, "training", "iterations", ac_.epochs);
    ac_.lr = positive_real(cfg, "training", "lr", ac_.lr);
    ac_.optimizer = read_optimizer(cfg, ac_.optimizer);
    ac_.batch_size = cfg.count("training", "batch_size", ac_.batch_size);
    ac_.cold_restart_every = static_cast<int>(cfg.integer("training", "cold_restart_every", ac_.cold_restart_every));
    lang_ = read_langevin(cfg, "latent_sampler", LangevinConfig::latent_inference_default());
  }
  const char* module() const override { return "generative"; }
  void build(const Dataset& ds, Rng& rng) override { gen_ = spec_.make(example_dim(ds), rng); }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    Rng prior = run.stream("latents");
    std::vector<Tensor> latents;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) latents.push_back(prior.normal_tensor(gen_.latent_shape));
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "recon_error", "latent_norm", "resets", "cold_restart"});
    fit_generator_abp(gen_, ds.examples, latents, lang_, ac_, rng, [&](const AbpEpoch& e) {
      csv.row({std::to_string(e.epoch), num(e.recon_error), num(e.latent_norm), std::to_string(e.resets),
               e.cold_restart ? "1" : "0"});
    });
  }
  Checkpoint save() const override { return {{"generator", gen_.decoder.flat_params()}}; }
  void restore(const Checkpoint& ck) override { restore_net(gen_.decoder, ck, "generator"); }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override { return generator_samples(gen_, n, rng); }
  Metrics eval(const Dataset& ds, const Run& run) const override {
    Rng rng = run.stream("eval");
    std::vector<Tensor> latents;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) latents.push_back(rng.normal_tensor(gen_.latent_shape));
    infer_latents(gen_, ds.examples, latents, lang_, rng, true);
    return {{"recon_error", reconstruction_error(gen_, ds.examples, latents)}};
  }

 private:
  GeneratorSpec spec_;
  AbpConfig ac_;
  LangevinConfig lang_;
  GeneratorModel gen_;
};

class VaeFamily : public Family {
 public:
  explicit VaeFamily(const Config& cfg) : spec_(GeneratorSpec::read(cfg, "sigma2", 0.25, {32, 32}, true)) {
    vc_.learn_sigma2 = cfg.flag("model", "learn_sigma2", vc_.learn_sigma2);
    vc_.mc_samples = cfg.count("model", "mc_samples", vc_.mc_samples);
    if (vc_.mc_samples == 0) throw ConfigKeyError("model", "mc_samples", "must be positive");
    vc_.epochs = positive_int(cfg, "training", "iterations", vc_.epochs);
    vc_.lr = positive_real(cfg, "training", "lr", vc_.lr);
    vc_.lr_final = positive_real(cfg, "training", "lr_final", vc_.lr);
    vc_.optimizer = read_optimizer(cfg, vc_.optimizer);
    vc_.batch_size = cfg.count("training", "batch_size", vc_.batch_size);
  }
  const char* module() const override { return "bridges"; }
  void build(const Dataset& ds, Rng& rng) override {
    gen_ = spec_.make(example_dim(ds), rng);
    inf_ = spec_.make_encoder(example_dim(ds), rng);
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    CsvWriter csv(run.out / "metrics.csv",
                  {"iteration", "elbo", "standard_error", "recon", "kl", "sigma2", "encoder_sd"});
    fit_vae(gen_, inf_, ds.examples, vc_, rng, [&](const VaeEpoch& e) {
      csv.row({std::to_string(e.epoch), num(e.elbo), num(e.standard_error), num(e.recon), num(e.kl), num(e.sigma2),
               num(e.encoder_sd)});
    });
  }
  Checkpoint save() const override {
    return {{"generator", gen_.decoder.flat_params()},
            {"encoder", inf_.encoder.flat_params()},
            {"sigma2", Tensor::scalar(gen_.sigma2)}};
  }
  void restore(const Checkpoint& ck) override {
    restore_net(gen_.decoder, ck, "generator");
    restore_net(inf_.encoder, ck, "encoder");
    gen_.sigma2 = need(ck, "sigma2").item();
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override { return generator_samples(gen_, n, rng); }
  Metrics eval(const Dataset& ds, const Run& run) const override {
    const auto e = vae_elbo(gen_, inf_, ds.examples, run.stream("eval"), 10, false);
    return {{"elbo", e.elbo}, {"standard_error", e.standard_error}, {"recon", e.recon}, {"kl", e.kl}};
  }

 private:
  GeneratorSpec spec_;
  VaeConfig vc_;
  GeneratorModel gen_;
  InferenceModel inf_;
};

// Langevin-mode introspective learning on 2-D points with RBF features on a
// grid covering the data.
class IntrospectiveFamily : public Family {
 public:
  explicit IntrospectiveFamily(const Config& cfg) {
    per_axis_ = cfg.count("model", "rbf_per_axis", 8);
    if (per_axis_ < 2) throw ConfigKeyError("model", "rbf_per_axis", "must be at least 2");
    bandwidth_ = positive_real(cfg, "model", "bandwidth", 0.4);
    base_sigma2_ = positive_real(cfg, "model", "base_sigma2", 1.0);
    ic_.rounds = positive_int(cfg, "training", "iterations", 10);
    ic_.logistic.ridge = cfg.real("training", "ridge", ic_.logistic.ridge);
    ic_.negatives = cfg.count("training", "negatives", ic_.negatives);
    ic_.persistent = cfg.flag("training", "persistent", ic_.persistent);
    lang_ = read_langevin(cfg, "sampler", {0.1, 100, false, 0, 1.0});
  }
  const char* module() const override { return "bridges"; }
  void build(const Dataset& ds, Rng&) override {
    if (example_dim(ds) != 2) throw ConfigKeyError("dataset", "name", "introspective runs on 2-D point data");
    double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
    for (const auto& x : ds.examples)
      for (int a = 0; a < 2; ++a) {
        lo[a] = std::min(lo[a], x[a]);
        hi[a] = std::max(hi[a], x[a]);
      }
    std::vector<Tensor> centers;
    const double steps = static_cast<double>(per_axis_ - 1);
    for (std::size_t i = 0; i < per_axis_; ++i)
      for (std::size_t j = 0; j < per_axis_; ++j)
        centers.push_back(Tensor::vector({lo[0] + (hi[0] - lo[0]) * static_cast<double>(i) / steps,
                                          lo[1] + (hi[1] - lo[1]) * static_cast<double>(j) / steps}));
    model_ = TiltedModel{rbf_feature_map(centers, bandwidth_), Reference::gaussian(base_sigma2_), {}};
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    CsvWriter csv(run.out / "metrics.csv", {"iteration", "log_loss", "theta_norm", "offset"});
    auto f = introspective_fit_langevin(ds.examples, model_.map, model_.base, lang_, ic_, rng,
                                        [&](const IntrospectiveRound& r, std::span<const Tensor>) {
                                          csv.row({std::to_string(r.round), num(r.log_loss), num(r.theta_norm),
                                                   num(r.offset)});
                                        });
    model_.tilts = f.model.tilts;
  }
  Checkpoint save() const override {
    Checkpoint ck{{"tilts", Tensor::scalar(static_cast<double>(model_.tilts.size()))}};
    for (std::size_t t = 0; t < model_.tilts.size(); ++t) {
      ck["theta_" + std::to_string(t)] = model_.tilts[t].theta;
      ck["offset_" + std::to_string(t)] = Tensor::scalar(model_.tilts[t].offset);
    }
    return ck;
  }
  void restore(const Checkpoint& ck) override {
    model_.tilts.clear();
    const auto n = static_cast<std::size_t>(need(ck, "tilts").item());
    for (std::size_t t = 0; t < n; ++t)
      model_.tilts.push_back({need(ck, "theta_" + std::to_string(t)), need(ck, "offset_" + std::to_string(t)).item()});
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override {
    std::vector<Tensor> inits;
    for (std::size_t i = 0; i < n; ++i) inits.push_back(rng.normal_tensor({2}, std::sqrt(base_sigma2_)));
    const TiltedModel& m = model_;
    const auto chains = run_chains(inits, [&m](const Tensor& x) { return m.energy(x); }, lang_, rng);
    std::vector<Tensor> out;
    for (const auto& c : chains) out.push_back(c.point);
    return out;
  }
  Metrics eval(const Dataset& ds, const Run& run) const override {
    Rng rng = run.stream("eval");
    const auto synth = sample(ds.examples.size(), rng);
    auto mean_log = [&](std::span<const Tensor> xs) {
      double acc = 0.0;
      for (const auto& x : xs) acc += model_.log_density(x);
      return acc / static_cast<double>(xs.size());
    };
    return {{"mean_log_density_data", mean_log(ds.examples)}, {"mean_log_density_synth", mean_log(synth)}};
  }

 private:
  std::size_t per_axis_ = 8;
  double bandwidth_ = 0.4, base_sigma2_ = 1.0;
  IntrospectiveConfig ic_;
  LangevinConfig lang_;
  TiltedModel model_{FeatureMap::raw_moments(1, 1), Reference::gaussian(1.0), {}};
};

// EBM plus generator families on point data; mode coverage is logged when the
// dataset records its centres.
class PairFamily : public Family {
 public:
  PairFamily(const Config& cfg, double ebm_sigma2)
      : ebm_spec_(EbmSpec::read(cfg, ebm_sigma2)),
        gen_spec_(GeneratorSpec::read(cfg, "gen_sigma2", 0.01, ebm_spec_.hidden, true)) {}
  const char* module() const override { return "bridges"; }
  void build(const Dataset& ds, Rng& rng) override {
    const auto p = example_dim(ds);
    ebm_ = ebm_spec_.make(p, rng);
    gen_ = gen_spec_.make(p, rng);
    inf_ = gen_spec_.make_encoder(p, rng);
    centers_ = truth_centers(ds);
  }
  bool can_sample() const override { return true; }
  std::vector<Tensor> sample(std::size_t n, Rng& rng) const override { return generator_samples(gen_, n, rng); }
  Metrics eval(const Dataset& ds, const Run& run) const override {
    Rng rng = run.stream("eval");
    const auto synth = sample(run.samples, rng);
    Metrics m{{"mean_u_data", mean_energy(ebm_, ds.examples, true)}, {"mean_u_gen", mean_energy(ebm_, synth, true)}};
    if (!centers_.empty()) {
      const auto f = nearest_center_fractions(synth, centers_);
      m.emplace_back("modes_covered", static_cast<double>(modes_covered(synth, centers_)));
      m.emplace_back("min_mode_fraction", *std::min_element(f.begin(), f.end()));
    }
    return m;
  }

 protected:
  void with_coverage(std::vector<std::string>& header) const {
    if (!centers_.empty()) header.push_back("modes_covered");
  }
  // Coverage of 1000 generator draws, every eval_every iterations and at the end.
  void add_coverage(std::vector<std::string>& row, int iteration, int last, const Run& run) const {
    if (centers_.empty()) return;
    if (iteration % static_cast<int>(std::max<std::size_t>(run.eval_every, 1)) != 0 && iteration != last) {
      row.emplace_back();
      return;
    }
    Rng rng = run.stream("coverage").split(static_cast<std::uint64_t>(iteration));
    const auto draws = generator_samples(gen_, 1000, rng);
    row.push_back(std::to_string(modes_covered(draws, centers_)));
  }
  Checkpoint save_pair() const {
    return {{"ebm", ebm_.score.flat_params()}, {"generator", gen_.decoder.flat_params()},
            {"encoder", inf_.encoder.flat_params()}};
  }
  void restore_pair(const Checkpoint& ck) {
    restore_net(ebm_.score, ck, "ebm");
    restore_net(gen_.decoder, ck, "generator");
    restore_net(inf_.encoder, ck, "encoder");
  }

  EbmSpec ebm_spec_;
  GeneratorSpec gen_spec_;
  DeepEnergyModel ebm_;
  GeneratorModel gen_;
  InferenceModel inf_;
  std::vector<Tensor> centers_;
};

class AdversarialFamily : public PairFamily {
 public:
  AdversarialFamily(const Config& cfg, bool triangle) : PairFamily(cfg, 1.0), triangle_(triangle) {
    ac_.iterations = positive_int(cfg, "training", "iterations", ac_.iterations);
    ac_.batch_size = cfg.count("training", "batch_size", ac_.batch_size);
    ac_.gen_samples = cfg.count("training", "gen_samples", ac_.gen_samples);
    const double lr = positive_real(cfg, "training", "lr", ac_.lr_theta);
    ac_.lr_theta = positive_real(cfg, "training", "lr_theta", lr);
    ac_.lr_alpha = positive_real(cfg, "training", "lr_alpha", lr);
    ac_.lr_phi = positive_real(cfg, "training", "lr_phi", lr);
    ac_.optimizer = read_optimizer(cfg, ac_.optimizer);
    ac_.mc_samples = cfg.count("model", "mc_samples", ac_.mc_samples);
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    std::vector<std::string> header{"iteration", "mean_u_data", "mean_u_gen", "mean_log_rho", "elbo", "value", "skipped"};
    with_coverage(header);
    CsvWriter csv(run.out / "metrics.csv", header);
    auto cb = [&](const AdversarialStep& s) {
      std::vector<std::string> row{std::to_string(s.iteration), num(s.mean_u_data), num(s.mean_u_gen),
                                   num(s.mean_log_rho),        num(s.elbo),        num(s.value),
                                   s.skipped ? "1" : "0"};
      add_coverage(row, s.iteration, ac_.iterations, run);
      csv.row(row);
    };
    if (triangle_) fit_triangle(ebm_, gen_, inf_, ds.examples, ac_, rng, cb);
    else fit_acd(ebm_, gen_, inf_, ds.examples, ac_, rng, cb);
  }
  Checkpoint save() const override { return save_pair(); }
  void restore(const Checkpoint& ck) override { restore_pair(ck); }

 private:
  bool triangle_;
  AdversarialConfig ac_;
};

class CoopFamily : public PairFamily {
 public:
  explicit CoopFamily(const Config& cfg) : PairFamily(cfg, 1.0) {
    cc_.iterations = positive_int(cfg, "training", "iterations", cc_.iterations);
    cc_.synth = cfg.count("training", "synth", cc_.synth);
    cc_.batch_size = cfg.count("training", "batch_size", cc_.batch_size);
    const double lr = positive_real(cfg, "training", "lr", cc_.lr_theta);
    cc_.lr_theta = positive_real(cfg, "training", "lr_theta", lr);
    cc_.lr_alpha = positive_real(cfg, "training", "lr_alpha", lr);
    cc_.optimizer = read_optimizer(cfg, cc_.optimizer);
    cc_.rigorous = cfg.flag("model", "rigorous", cc_.rigorous);
    cc_.alpha_first = cfg.flag("model", "alpha_first", cc_.alpha_first);
    cc_.decoder_noise = cfg.flag("model", "decoder_noise", cc_.decoder_noise);
    cc_.infer_lang = read_langevin(cfg, "latent_sampler", cc_.infer_lang);
    lang_ = read_langevin(cfg, "sampler", coop_langevin_default());
  }
  void fit(const Dataset& ds, const Run& run) override {
    Rng rng = run.stream("fit");
    std::vector<std::string> header{"iteration",   "mean_u_data", "mean_u_synth",
                                    "energy_gap",  "recon_error", "diverged"};
    with_coverage(header);
    CsvWriter csv(run.out / "metrics.csv", header);
    coop_fit(ebm_, gen_, ds.examples, lang_, cc_, rng, [&](const CoopIteration& it, std::span<const Tensor>) {
      std::vector<std::string> row{std::to_string(it.iteration), num(it.mean_u_data), num(it.mean_u_synth),
                                   num(it.energy_gap),           num(it.recon_error), std::to_string(it.diverged)};
      add_coverage(row, it.iteration, cc_.iterations, run);
      csv.row(row);
    });
  }
  Checkpoint save() const override {
    auto ck = save_pair();
    ck.erase("encoder");
    return ck;
  }
  void restore(const Checkpoint& ck) override {
    restore_net(ebm_.score, ck, "ebm");
    restore_net(gen_.decoder, ck, "generator");
  }

 private:
  CoopConfig cc_;
  LangevinConfig lang_;
};

using Factory = std::unique_ptr<Family> (*)(const Config&);

const std::vector<std::pair<std::string, Factory>>& registry() {
  static const std::vector<std::pair<std::string, Factory>> r = {
      {"logistic", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<LogisticFamily>(c); }},
      {"softmax", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<SoftmaxFamily>(c); }},
      {"linear-descriptive",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<LinearDescriptiveFamily>(c); }},
      {"deep-ebm", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<DeepEbmFamily>(c); }},
      {"multigrid", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<MultigridFamily>(c); }},
      {"factor-analysis",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<FactorAnalysisFamily>(c); }},
      {"sparse-coding",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<SparseCodingFamily>(c); }},
      {"ica", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<IcaFamily>(c); }},
      {"nmf", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<FactorizeFamily>(c, false); }},
      {"masked-mf",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<FactorizeFamily>(c, true); }},
      {"rbm", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<RbmFamily>(c); }},
      {"abp", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<AbpFamily>(c); }},
      {"vae", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<VaeFamily>(c); }},
      {"introspective",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<IntrospectiveFamily>(c); }},
      {"acd", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<AdversarialFamily>(c, false); }},
      {"triangle",
       [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<AdversarialFamily>(c, true); }},
      {"coopnets", [](const Config& c) -> std::unique_ptr<Family> { return std::make_unique<CoopFamily>(c); }},
  };
  return r;
}

std::unique_ptr<Family> make_family(const std::string& name, const Config& cfg) {
  for (const auto& [n, f] : registry())
    if (n == name) return f(cfg);
  std::string valid;
  for (const auto& n : family_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigKeyError("model", "family", "unknown family '" + name + "'; valid: " + valid);
}

DatasetSpec read_dataset_spec(const Config& cfg) {
  DatasetSpec s;
  s.name = cfg.str("dataset", "name");
  s.n = cfg.count("dataset", "n", s.n);
  s.k = cfg.count("dataset", "k", s.k);
  s.radius = cfg.real("dataset", "radius", s.radius);
  s.sd = cfg.real("dataset", "sd", s.sd);
  s.p = cfg.count("dataset", "p", s.p);
  s.d = cfg.count("dataset", "d", s.d);
  s.sigma2 = cfg.real("dataset", "sigma2", s.sigma2);
  s.sparsity = cfg.count("dataset", "sparsity", s.sparsity);
  s.rank = cfg.count("dataset", "rank", s.rank);
  s.mask_rate = cfg.real("dataset", "mask_rate", s.mask_rate);
  s.size = cfg.count("dataset", "size", s.size);
  if (cfg.has("dataset", "texture")) {
    const auto t = cfg.str("dataset", "texture");
    s.texture = keyed("dataset", "texture", [&] { return parse_texture_kind(t); });
  }
  const auto& names = dataset_names();
  if (std::find(names.begin(), names.end(), s.name) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigKeyError("dataset", "name", "unknown dataset '" + s.name + "'; valid: " + valid);
  }
  return s;
}

void apply_thread_cap() {
  const char* env = std::getenv("MODELZOO_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n <= 0) throw ConfigError("environment", "MODELZOO_THREADS must be a positive integer");
  omp_set_num_threads(static_cast<int>(n));
}

// One process per output directory.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw Error("lock", "output directory is in use (" + path_.string() + " exists; remove it if no run is active)");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

void write_samples(const fs::path& out, const std::vector<Tensor>& samples) {
  if (samples.empty()) return;
  if (samples.front().rank() == 3) {
    fs::create_directories(out / "samples");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", i);
      write_pnm(out / "samples" / name, samples[i]);
    }
    return;
  }
  std::vector<std::string> header;
  for (std::size_t j = 0; j < samples.front().size(); ++j) header.push_back("x" + std::to_string(j));
  CsvWriter csv(out / "samples.csv", header);
  for (const auto& s : samples) {
    std::vector<std::string> row;
    for (double v : s.values()) row.push_back(num(v));
    csv.row(row);
  }
}

void run_impl(Verb verb, const RunOptions& opts, Where& where) {
  const Config cfg = Config::load(opts.config);
  cfg.require_section("experiment");
  cfg.require_section("dataset");
  cfg.require_section("model");
  Run run;
  run.seed = cfg.u64("experiment", "seed");
  const std::string default_out = "runs/" + fs::path(opts.config).stem().string();
  const std::string out_key = cfg.str("experiment", "out", default_out);
  run.out = opts.out ? fs::path(*opts.out) : fs::path(out_key);
  run.eval_every = cfg.count("output", "eval_every", run.eval_every);
  run.samples = cfg.count("output", "samples", run.samples);
  const DatasetSpec spec = read_dataset_spec(cfg);
  const fs::path data_dir = cfg.has("dataset", "dir") ? fs::path(cfg.str("dataset", "dir")) : run.out / "data";
  const std::string family_name = cfg.str("model", "family");
  auto family = make_family(family_name, cfg);
  cfg.reject_unread();
  apply_thread_cap();

  where.section = "output";
  fs::create_directories(run.out);
  OutputLock lock(run.out);

  where.section = "dataset";
  if (verb == Verb::kGenData) {
    Rng rng = run.stream("data");
    save_dataset(data_dir, make_dataset(spec, rng), spec, run.seed);
    return;
  }
  Dataset ds = load_dataset(data_dir);
  if (ds.name != spec.name)
    throw ConfigKeyError("dataset", "name", "data in " + data_dir.string() + " is " + ds.name + "; rerun gen-data");
  if (!family->images())
    for (auto& x : ds.examples) x = x.reshaped({x.size()});

  where.module = family->module();
  where.section = "architecture";
  Rng init = run.stream("init");
  family->build(ds, init);

  const fs::path model_path = run.out / "model.bin";
  switch (verb) {
    case Verb::kFit:
      where.section = "training";
      family->fit(ds, run);
      where.section = "output";
      save_checkpoint(model_path, family->save());
      break;
    case Verb::kSample: {
      if (!family->can_sample()) throw ConfigKeyError("model", "family", family_name + " has no sampler");
      where.section = "output";
      family->restore(load_checkpoint(model_path));
      where.section = "sampler";
      Rng rng = run.stream("sample");
      const auto samples = family->sample(run.samples, rng);
      where.section = "output";
      write_samples(run.out, samples);
      break;
    }
    case Verb::kEval: {
      where.section = "output";
      family->restore(load_checkpoint(model_path));
      const auto metrics = family->eval(ds, run);
      CsvWriter csv(run.out / "eval.csv", {"metric", "value"});
      for (const auto& [k, v] : metrics) csv.row({k, num(v)});
      break;
    }
    case Verb::kGenData:
      break;
  }
}

const char* error_type(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  if (dynamic_cast<const InfeasibleError*>(&e)) return "InfeasibleError";
  if (dynamic_cast<const SizeError*>(&e)) return "SizeError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const NumericError*>(&e)) return "NumericError";
  if (dynamic_cast<const Error*>(&e)) return "Error";
  return "InternalError";
}

}  // namespace

Verb parse_verb(const std::string& name) {
  if (name == "gen-data") return Verb::kGenData;
  if (name == "fit") return Verb::kFit;
  if (name == "sample") return Verb::kSample;
  if (name == "eval") return Verb::kEval;
  throw ConfigError("cli", "unknown verb '" + name + "'; valid: gen-data, fit, sample, eval");
}

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [n, f] : registry()) out.push_back(n);
    return out;
  }();
  return names;
}

void run(Verb verb, const RunOptions& opts) {
  Where where;
  run_impl(verb, opts, where);
}

int run_reporting(Verb verb, const RunOptions& opts, std::ostream& err) {
  Where where;
  nlohmann::json line = {{"status", "error"}};
  try {
    run_impl(verb, opts, where);
    return 0;
  } catch (const ConfigKeyError& e) {
    line["type"] = "ConfigError";
    line["module"] = "cli";
    line["operation"] = "config";
    line["section"] = e.section();
    if (!e.key().empty()) line["key"] = e.key();
    line["message"] = e.what();
  } catch (const Error& e) {
    line["type"] = error_type(e);
    line["module"] = where.module;
    line["operation"] = e.context();
    line["section"] = where.section;
    line["message"] = e.what();
  } catch (const std::exception& e) {
    line["type"] = error_type(e);
    line["module"] = where.module;
    line["operation"] = "unknown";
    line["section"] = where.section;
    line["message"] = e.what();
  }
  err << line.dump() << std::endl;
  return line["type"] == "ConfigError" ? 2 : 1;
}

}  // namespace modelzoo
