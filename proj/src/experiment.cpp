#include "cdgp/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cdgp/gp.hpp"
#include "cdgp/kernels.hpp"
#include "cdgp/moments.hpp"

namespace cdgp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (...) {
    return false;
  }
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_vec(const Eigen::VectorXd& v) {
  std::string out = "[";
  for (int i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt(v[i]);
  }
  return out + "]";
}

std::string fmt_mat_rows(const Eigen::MatrixXd& M) {
  std::string out = "[";
  for (int i = 0; i < M.rows(); ++i) {
    if (i) out += ", ";
    out += fmt_vec(M.row(i).transpose());
  }
  return out + "]";
}

// Kernel parameters in natural units, named without the log_ prefix.
std::string kernel_params_json(const KernelSpec& k) {
  const auto names = k.param_names();
  std::string out = "{";
  for (int i = 0; i < k.n_params(); ++i) {
    if (i) out += ", ";
    std::string name = names[i];
    if (name.rfind("log_", 0) == 0) name = name.substr(4);
    out += "\"" + name + "\": " + fmt(k.param(i));
  }
  return out + "}";
}

}  // namespace

IngestResult ingest_csv(const std::string& path, const std::string& name) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file: " + path);
  IngestResult res;
  std::vector<std::pair<double, double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto comma = t.find(',');
    double tv = 0.0, yv = 0.0;
    const bool ok = comma != std::string::npos && parse_double(trim(t.substr(0, comma)), tv) &&
                    parse_double(trim(t.substr(comma + 1)), yv);
    if (!ok) {
      if (lineno == 1) continue;  // header
      ++res.warnings;
      continue;
    }
    rows.emplace_back(tv, yv);
  }
  if (rows.empty()) throw std::runtime_error("no valid rows in data file: " + path);
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  res.data.name = name.empty() ? std::filesystem::path(path).stem().string() : name;
  res.data.t.resize(static_cast<int>(rows.size()));
  res.data.y.resize(static_cast<int>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    res.data.t[static_cast<int>(i)] = rows[i].first;
    res.data.y[static_cast<int>(i)] = rows[i].second;
  }
  return res;
}

SplitData standardize_split(const Dataset& ds, double split_fraction, double time_rescale) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw std::invalid_argument("split fraction must be in (0, 1)");
  if (!(time_rescale > 0.0)) throw std::invalid_argument("time rescale must be positive");
  const int N = ds.size();
  SplitData out;
  out.cut = ds.t.minCoeff() + split_fraction * (ds.t.maxCoeff() - ds.t.minCoeff());
  std::vector<int> tr, te;
  for (int i = 0; i < N; ++i) (ds.t[i] <= out.cut ? tr : te).push_back(i);
  if (static_cast<int>(tr.size()) < 10)
    throw std::invalid_argument("split leaves fewer than 10 training points");

  auto take = [&](const std::vector<int>& idx, Dataset& dst) {
    dst.name = ds.name;
    dst.t.resize(static_cast<int>(idx.size()));
    dst.y.resize(static_cast<int>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      dst.t[static_cast<int>(i)] = ds.t[idx[i]];
      dst.y[static_cast<int>(i)] = ds.y[idx[i]];
    }
  };
  take(tr, out.train_raw);
  take(te, out.test_raw);

  Standardizer& x = out.xform;
  x.time_rescale = time_rescale;
  x.t_mean = out.train_raw.t.mean();
  x.y_mean = out.train_raw.y.mean();
  const int n = out.train_raw.size();
  x.t_sd = std::sqrt((out.train_raw.t.array() - x.t_mean).square().sum() / n);
  x.y_sd = std::sqrt((out.train_raw.y.array() - x.y_mean).square().sum() / n);
  if (!(x.t_sd > 0.0)) throw std::invalid_argument("degenerate time axis (constant t)");
  if (!(x.y_sd > 0.0)) throw std::invalid_argument("degenerate target (constant y)");

  auto std_map = [&](const Dataset& src, Eigen::VectorXd& ts, Eigen::VectorXd& ys) {
    ts.resize(src.size());
    ys.resize(src.size());
    for (int i = 0; i < src.size(); ++i) {
      ts[i] = x.std_t(src.t[i]);
      ys[i] = x.std_y(src.y[i]);
    }
  };
  std_map(out.train_raw, out.t_train, out.y_train);
  std_map(out.test_raw, out.t_test, out.y_test);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kModels = {"se", "mixture", "sese", "cdgp2", "cdgp3"};

void assign_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  auto as_double = [&](double& dst) {
    if (!parse_double(value, dst))
      throw std::invalid_argument("config value for '" + key + "' is not a number: " + value);
  };
  auto as_int = [&](int& dst) {
    double d = 0.0;
    if (!parse_double(value, d) || d != std::floor(d))
      throw std::invalid_argument("config value for '" + key + "' is not an integer: " + value);
    dst = static_cast<int>(d);
  };
  auto as_bool = [&](bool& dst) {
    if (value == "true" || value == "1")
      dst = true;
    else if (value == "false" || value == "0")
      dst = false;
    else
      throw std::invalid_argument("config value for '" + key + "' is not a boolean: " + value);
  };

  if (key == "model") {
    if (std::find(kModels.begin(), kModels.end(), value) == kModels.end())
      throw std::invalid_argument("unknown model: " + value);
    cfg.model = value;
  } else if (key == "seed") {
    cfg.seed = std::stoull(value);
  } else if (key == "split_fraction") {
    as_double(cfg.split_fraction);
  } else if (key == "time_rescale") {
    as_double(cfg.time_rescale);
  } else if (key == "hyperdata_sizes") {
    cfg.hyperdata_sizes.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      double d = 0.0;
      if (!parse_double(item, d) || d != std::floor(d) || d < 1)
        throw std::invalid_argument("hyperdata_sizes entries must be positive integers");
      cfg.hyperdata_sizes.push_back(static_cast<int>(d));
    }
  } else if (key == "net_width") {
    as_int(cfg.net_width);
  } else if (key == "net_weight_std") {
    as_double(cfg.net_weight_std);
  } else if (key == "noise_init_var") {
    as_double(cfg.noise_init_var);
  } else if (key == "grid_points") {
    as_int(cfg.grid_points);
  } else if (key == "predict_noise") {
    as_bool(cfg.predict_noise);
  } else if (key == "grid_min") {
    as_double(cfg.grid_min);
  } else if (key == "grid_max") {
    as_double(cfg.grid_max);
  } else if (key == "sample_grid_points") {
    as_int(cfg.sample_grid_points);
  } else if (key == "train.max_iters") {
    as_int(cfg.train.max_iters);
  } else if (key == "train.lr") {
    as_double(cfg.train.lr);
  } else if (key == "train.beta1") {
    as_double(cfg.train.beta1);
  } else if (key == "train.beta2") {
    as_double(cfg.train.beta2);
  } else if (key == "train.adam_eps") {
    as_double(cfg.train.adam_eps);
  } else if (key == "train.max_halvings") {
    as_int(cfg.train.max_halvings);
  } else if (key == "train.rel_tol") {
    as_double(cfg.train.rel_tol);
  } else if (key == "train.tol_streak") {
    as_int(cfg.train.tol_streak);
  } else if (key == "train.restarts") {
    as_int(cfg.train.restarts);
  } else if (key == "train.optimize_z") {
    as_bool(cfg.train.optimize_z);
  } else if (key == "train.restart_param_std") {
    as_double(cfg.train.restart_param_std);
  } else if (key == "train.restart_weight_std") {
    as_double(cfg.train.restart_weight_std);
  } else {
    throw std::invalid_argument("unknown config key: " + key);
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_string(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not 'key = value': " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not 'key = value': " + line);
    assign_key(cfg, key, value);
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

std::vector<int> hyperdata_sizes_for(const ExperimentConfig& cfg,
                                     const std::string& dataset_name) {
  const bool conditional = cfg.model == "cdgp2" || cfg.model == "cdgp3";
  if (!cfg.hyperdata_sizes.empty()) {
    if (!conditional)
      throw std::invalid_argument("hyperdata_sizes only applies to cdgp2/cdgp3");
    const std::size_t want = cfg.model == "cdgp2" ? 1 : 2;
    if (cfg.hyperdata_sizes.size() != want)
      throw std::invalid_argument("hyperdata_sizes must list one size per conditioned layer");
    return cfg.hyperdata_sizes;
  }
  if (cfg.model == "cdgp2")
    return {dataset_name.find("airline") != std::string::npos ? 13 : 50};
  if (cfg.model == "cdgp3") return {37, 23};
  return {};
}

namespace {

Eigen::VectorXd linspace(double lo, double hi, int n) {
  Eigen::VectorXd v(n);
  if (n == 1) {
    v[0] = 0.5 * (lo + hi);
    return v;
  }
  for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * i / (n - 1);
  return v;
}

// Hyperdata input grid over a value range, widened when degenerate.
Eigen::MatrixXd z_grid(double lo, double hi, int M) {
  if (hi - lo < 0.1) {
    const double c = 0.5 * (lo + hi);
    lo = c - 1.0;
    hi = c + 1.0;
  }
  Eigen::MatrixXd Z(M, 1);
  Z.col(0) = linspace(lo, hi, M);
  return Z;
}

}  // namespace

LayerStack make_model_stack(const ExperimentConfig& cfg, const std::string& dataset_name,
                            const Eigen::VectorXd& t_train_std) {
  LayerStack st;
  st.noise_var = cfg.noise_init_var;
  if (cfg.model == "se") {
    st.exposed = KernelSpec::se(1.0, 1.0);
    return st;
  }
  if (cfg.model == "mixture") {
    st.exposed = KernelSpec::mixture({1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
    return st;
  }
  st.exposed = KernelSpec::se(1.0, 1.0);
  if (cfg.model == "sese") {
    ConditionedLayer lay;
    lay.kernel = KernelSpec::se(1.0, 1.0);
    st.inner.push_back(lay);
    return st;
  }
  const std::vector<int> sizes = hyperdata_sizes_for(cfg, dataset_name);
  const Eigen::MatrixXd X = t_train_std;
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    ConditionedLayer lay;
    lay.kernel = KernelSpec::se(1.0, 1.0);
    double lo, hi;
    if (l == 0) {
      lo = t_train_std.minCoeff();
      hi = t_train_std.maxCoeff();
    } else {
      // Span the range of the mean propagated through the layers built so far.
      const StackEval ev = propagate_stack(st, X);
      lo = ev.layers.back().mean.minCoeff();
      hi = ev.layers.back().mean.maxCoeff();
    }
    lay.hyperdata.Z = z_grid(lo, hi, sizes[l]);
    lay.net = HyperdataNet::init(cfg.net_width, 1, cfg.net_weight_std,
                                 cfg.seed + 101 * (static_cast<std::uint64_t>(l) + 1));
    lay.refresh_u();
    // Insert before the exposed layer; st.inner grows front-to-back.
    st.inner.push_back(lay);
  }
  return st;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

namespace {

struct QueryPrediction {
  Eigen::VectorXd mean, sd;  // standardized units
};

QueryPrediction predict_stack(const LayerStack& st, const Eigen::MatrixXd& Xtr,
                              const Eigen::VectorXd& ytr, const Eigen::MatrixXd& Xq,
                              bool include_noise) {
  const int N = static_cast<int>(Xtr.rows());
  const int P = static_cast<int>(Xq.rows());
  Eigen::MatrixXd Xall(N + P, Xtr.cols());
  Xall << Xtr, Xq;
  const StackEval ev = propagate_stack(st, Xall);
  const Eigen::MatrixXd Ktt = ev.K.topLeftCorner(N, N);
  const Eigen::MatrixXd Kqt = ev.K.bottomLeftCorner(P, N);
  const Eigen::VectorXd kss = ev.K.diagonal().tail(P);
  const Prediction pr = posterior_predict(Ktt, ytr, st.noise_var, Kqt, kss, include_noise);
  return {pr.mean, pr.var.cwiseSqrt()};
}

std::string predictions_csv(const Eigen::VectorXd& t_raw, const Eigen::VectorXd& mean_raw,
                            const Eigen::VectorXd& sd_raw) {
  std::string out = "t,mean,std\n";
  for (int i = 0; i < t_raw.size(); ++i)
    out += fmt(t_raw[i]) + "," + fmt(mean_raw[i]) + "," + fmt(sd_raw[i]) + "\n";
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& data_csv,
                                const std::string& out_dir) {
  const auto t_start = std::chrono::steady_clock::now();
  const IngestResult ing = ingest_csv(data_csv);
  const SplitData split = standardize_split(ing.data, cfg.split_fraction, cfg.time_rescale);

  const Eigen::MatrixXd Xtr = split.t_train;
  const LayerStack tmpl = make_model_stack(cfg, ing.data.name, split.t_train);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  ExperimentResult res;
  res.fit = fit(tmpl, Xtr, split.y_train, tc);
  res.logml = res.fit.logml;
  res.jitter_events = res.fit.jitter_events;
  const LayerStack& best = res.fit.stack;

  // Dense prediction grid over the full raw time range.
  const Eigen::VectorXd grid_raw = linspace(ing.data.t.minCoeff(), ing.data.t.maxCoeff(),
                                            cfg.grid_points);
  Eigen::MatrixXd grid_std(cfg.grid_points, 1);
  for (int i = 0; i < cfg.grid_points; ++i) grid_std(i, 0) = split.xform.std_t(grid_raw[i]);
  const QueryPrediction grid_pred =
      predict_stack(best, Xtr, split.y_train, grid_std, cfg.predict_noise);

  // Test RMSE in raw units.
  double rmse = 0.0;
  if (split.test_raw.size() > 0) {
    const Eigen::MatrixXd Xte = split.t_test;
    const QueryPrediction te = predict_stack(best, Xtr, split.y_train, Xte, false);
    double se_sum = 0.0;
    for (int i = 0; i < split.test_raw.size(); ++i) {
      const double err = split.xform.raw_y(te.mean[i]) - split.test_raw.y[i];
      se_sum += err * err;
    }
    rmse = std::sqrt(se_sum / split.test_raw.size());
  }
  res.test_rmse = rmse;

  // Latent tables at the dense grid plus the first layer's hyperdata inputs.
  std::vector<std::string> latent_csvs;
  if (best.depth() >= 2) {
    std::vector<double> lat_t(grid_std.col(0).begin(), grid_std.col(0).end());
    if (best.inner[0].hyperdata.size() > 0) {
      const auto& Z = best.inner[0].hyperdata.Z;
      for (int m = 0; m < Z.rows(); ++m) lat_t.push_back(Z(m, 0));
    }
    std::sort(lat_t.begin(), lat_t.end());
    Eigen::MatrixXd Xlat(static_cast<int>(lat_t.size()), 1);
    for (std::size_t i = 0; i < lat_t.size(); ++i) Xlat(static_cast<int>(i), 0) = lat_t[i];
    const StackEval ev = propagate_stack(best, Xlat);
    for (const auto& table : ev.layers) {
      std::string csv = "t,mean,std\n";
      for (int i = 0; i < Xlat.rows(); ++i) {
        const double sd = std::sqrt(std::max(table.cov(i, i), 0.0));
        csv += fmt(split.xform.raw_t(Xlat(i, 0))) + "," + fmt(table.mean[i]) + "," + fmt(sd) +
               "\n";
      }
      latent_csvs.push_back(std::move(csv));
    }
  }

  const auto t_end = std::chrono::steady_clock::now();
  res.runtime_sec = std::chrono::duration<double>(t_end - t_start).count();

  // Results document (stable key order; %.17g numbers).
  std::ostringstream js;
  js << "{\n";
  js << "  \"model\": \"" << cfg.model << "\",\n";
  js << "  \"dataset\": \"" << ing.data.name << "\",\n";
  js << "  \"seed\": " << cfg.seed << ",\n";
  js << "  \"logml\": " << fmt(res.logml) << ",\n";
  js << "  \"test_rmse\": " << fmt(res.test_rmse) << ",\n";
  js << "  \"params\": {\n";
  js << "    \"layers\": [";
  for (std::size_t l = 0; l < best.inner.size(); ++l) {
    if (l) js << ", ";
    js << kernel_params_json(best.inner[l].kernel);
  }
  js << "],\n";
  js << "    \"exposed\": " << kernel_params_json(best.exposed) << ",\n";
  js << "    \"noise_sigma\": " << fmt(std::sqrt(best.noise_var)) << "\n";
  js << "  },\n";
  js << "  \"hyperdata\": {\n";
  js << "    \"layers\": [";
  for (std::size_t l = 0; l < best.inner.size(); ++l) {
    if (l) js << ", ";
    js << "{\"z\": " << fmt_mat_rows(best.inner[l].hyperdata.Z)
       << ", \"u\": " << fmt_vec(best.inner[l].hyperdata.u) << "}";
  }
  js << "]\n";
  js << "  },\n";
  js << "  \"runtime_sec\": " << fmt(res.runtime_sec) << ",\n";
  js << "  \"jitter_events\": " << res.jitter_events << "\n";
  js << "}\n";
  res.results_json = js.str();

  // Raw-unit prediction CSV.
  Eigen::VectorXd mean_raw(cfg.grid_points), sd_raw(cfg.grid_points);
  for (int i = 0; i < cfg.grid_points; ++i) {
    mean_raw[i] = split.xform.raw_y(grid_pred.mean[i]);
    sd_raw[i] = split.xform.raw_y_scale(grid_pred.sd[i]);
  }

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  res.results_path = (fs::path(out_dir) / "results.json").string();
  res.predictions_path = (fs::path(out_dir) / "predictions.csv").string();
  write_file_atomic(res.results_path, res.results_json);
  write_file_atomic(res.predictions_path, predictions_csv(grid_raw, mean_raw, sd_raw));
  for (std::size_t l = 0; l < latent_csvs.size(); ++l) {
    const std::string p =
        (fs::path(out_dir) / ("latent_layer" + std::to_string(l + 1) + ".csv")).string();
    write_file_atomic(p, latent_csvs[l]);
    res.latent_paths.push_back(p);
  }
  return res;
}

// ---------------------------------------------------------------------------

std::string diagnose_report(const ExperimentConfig& cfg, int corrupt_index) {
  // Deterministic synthetic task.
  const int N = 12;
  const Eigen::VectorXd t = linspace(-2.0, 2.0, N);
  Eigen::VectorXd y(N);
  for (int i = 0; i < N; ++i) y[i] = std::sin(2.0 * t[i]) + 0.1 * std::cos(5.0 * t[i]);
  const Eigen::MatrixXd X = t;

  ExperimentConfig dcfg = cfg;
  if (dcfg.hyperdata_sizes.empty()) {
    if (dcfg.model == "cdgp2") dcfg.hyperdata_sizes = {5};
    if (dcfg.model == "cdgp3") dcfg.hyperdata_sizes = {5, 4};
  }
  const LayerStack stack = make_model_stack(dcfg, "diagnose", t);

  // Gradient check against central differences.
  const GradCheckResult gc = grad_check(stack, X, y, 1e-5, false, corrupt_index);
  const double grad_tol = stack.depth() >= 3 ? 1e-3 : 1e-4;
  const bool grad_ok = gc.pass(grad_tol);

  // Monte Carlo against the closed-form effective Gram on a small subset.
  const int Nmc = 6;
  Eigen::MatrixXd Xmc = linspace(-1.5, 1.5, Nmc);
  McOptions mco;
  mco.n_samples = 40000;
  mco.seed = dcfg.seed + 7;
  const McMoments mc = mc_sample_composite(stack, Xmc, mco);
  const Eigen::MatrixXd Kmc = propagate_stack(stack, Xmc).K;
  double max_z = 0.0;
  for (int i = 0; i < Nmc; ++i)
    for (int j = 0; j < Nmc; ++j) {
      const double se = std::max(mc.second_se(i, j), 1e-12);
      max_z = std::max(max_z, std::abs(Kmc(i, j) - mc.second(i, j)) / se);
    }
  const bool mc_ok = max_z <= 4.0;
  const std::string mc_mode = stack.depth() == 1 ? "plain_gp" : "two_stage";

  // PSD factorization of random effective Grams.
  std::mt19937_64 rng(dcfg.seed + 99);
  std::uniform_real_distribution<double> unif(0.1, 3.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  double max_jitter = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    LayerStack st;
    st.exposed = KernelSpec::se(unif(rng), unif(rng));
    const int depth = 2 + rep % 2;
    for (int l = 0; l + 1 < depth; ++l) {
      ConditionedLayer lay;
      lay.kernel = KernelSpec::se(unif(rng), unif(rng));
      Hyperdata hd;
      hd.Z = Eigen::MatrixXd(6, 1);
      hd.Z.col(0) = linspace(-2.0, 2.0, 6);
      hd.u = Eigen::VectorXd(6);
      for (int m = 0; m < 6; ++m) hd.u[m] = nd(rng);
      lay.hyperdata = hd;
      st.inner.push_back(lay);
    }
    Eigen::MatrixXd Xr(20, 1);
    for (int i = 0; i < 20; ++i) Xr(i, 0) = 2.0 * nd(rng);
    const CholFactor ch = chol_jitter(propagate_stack(st, Xr).K);
    max_jitter = std::max(max_jitter, ch.jitter);
  }
  const bool psd_ok = max_jitter <= 1e-8;

  // Heavy-tail gap grid and the exact reference point.
  double min_gap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 21; ++j)
      min_gap = std::min(min_gap, heavy_tail_gap(5.0 * i / 20.0, 5.0 * j / 20.0));
  const double gap01_err =
      std::abs(heavy_tail_gap(0.0, 1.0) - (1.0 / std::sqrt(3.0) - 0.5));
  const bool tail_ok = min_gap >= -1e-16 && gap01_err <= 1e-12;

  const bool all_ok = grad_ok && mc_ok && psd_ok && tail_ok;
  std::ostringstream js;
  js << "{\n";
  js << "  \"model\": \"" << dcfg.model << "\",\n";
  js << "  \"grad_check\": {\"max_rel_err\": " << fmt(gc.max_rel_err)
     << ", \"tol\": " << fmt(grad_tol) << ", \"pass\": " << (grad_ok ? "true" : "false")
     << "},\n";
  js << "  \"mc_vs_closed_form\": {\"mode\": \"" << mc_mode << "\", \"max_z\": " << fmt(max_z)
     << ", \"pass\": " << (mc_ok ? "true" : "false") << "},\n";
  js << "  \"psd\": {\"max_jitter\": " << fmt(max_jitter)
     << ", \"pass\": " << (psd_ok ? "true" : "false") << "},\n";
  js << "  \"heavy_tail\": {\"min_gap\": " << fmt(min_gap)
     << ", \"gap01_err\": " << fmt(gap01_err) << ", \"pass\": " << (tail_ok ? "true" : "false")
     << "},\n";
  js << "  \"pass\": " << (all_ok ? "true" : "false") << "\n";
  js << "}\n";
  return js.str();
}

std::string sample_report(const ExperimentConfig& cfg, std::int64_t n_samples,
                          std::uint64_t seed) {
  const Eigen::VectorXd grid = linspace(cfg.grid_min, cfg.grid_max, cfg.sample_grid_points);
  const Eigen::MatrixXd X = grid;
  const LayerStack stack = make_model_stack(cfg, "sample", grid);
  McOptions opt;
  opt.n_samples = n_samples;
  opt.seed = seed;
  const McMoments mc = mc_sample_composite(stack, X, opt);
  const Eigen::MatrixXd K = propagate_stack(stack, X).K;
  double max_z = 0.0;
  for (int i = 0; i < K.rows(); ++i)
    for (int j = 0; j < K.cols(); ++j)
      max_z = std::max(max_z, std::abs(K(i, j) - mc.second(i, j)) /
                                  std::max(mc.second_se(i, j), 1e-12));

  std::ostringstream js;
  js << "{\n";
  js << "  \"model\": \"" << cfg.model << "\",\n";
  js << "  \"n_samples\": " << n_samples << ",\n";
  js << "  \"seed\": " << seed << ",\n";
  js << "  \"grid\": " << fmt_vec(grid) << ",\n";
  js << "  \"kernel\": " << fmt_mat_rows(K) << ",\n";
  js << "  \"mc_second\": " << fmt_mat_rows(mc.second) << ",\n";
  js << "  \"mc_se\": " << fmt_mat_rows(mc.second_se) << ",\n";
  js << "  \"max_z\": " << fmt(max_z) << "\n";
  js << "}\n";
  return js.str();
}

}  // namespace cdgp
