#pragma once

// Command implementations behind the pose_cli binary. Each command resolves
// its configuration, writes resolved_config.json next to its outputs and
// returns a process exit code.

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pose/bench.hpp"
#include "pose/checkpoint.hpp"
#include "pose/config.hpp"
#include "pose/error.hpp"
#include "pose/evalkit.hpp"
#include "pose/plot.hpp"
#include "pose/spectrum.hpp"
#include "pose/trainer.hpp"

namespace pose::cli {

namespace fs = std::filesystem;
using config::Json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kDiverged = 3 };

inline constexpr const char* kManifestName = "manifest.jsonl";

// ---------------------------------------------------------------------------
// Shared helpers

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

inline void write_json_file(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// NaN (an unseen type with no samples) is written as null.
inline Json metric(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline bench::BenchmarkManifest load_bench(const fs::path& bench_dir) {
  return bench::load_manifest(bench_dir / kManifestName);
}

inline fs::path checkpoint_dir(const fs::path& run_dir, const std::string& which) {
  if (which == "final") return train::final_dir(run_dir);
  if (!which.empty() && std::all_of(which.begin(), which.end(), [](unsigned char c) { return std::isdigit(c); }))
    return train::epoch_dir(run_dir, std::stoi(which));
  return fs::path(which).is_absolute() ? fs::path(which) : run_dir / which;
}

inline train::LoadedRun load_run(const config::RunConfig& rc) {
  const fs::path dir = checkpoint_dir(rc.path("run_dir"), rc.section("eval").at("checkpoint"));
  if (!fs::is_directory(dir / "task")) throw IoError("missing checkpoint " + dir.string());
  return train::load_checkpoint(dir);
}

inline void check_input_size(const TaskModel<float>& task, const bench::BenchmarkManifest& m) {
  if (task.config().input_size != m.input_size)
    throw InvalidInput("checkpoint expects " + std::to_string(task.config().input_size) + " px images, benchmark has " +
                       std::to_string(m.input_size));
}

// Unit-normalised embeddings (N, D) in chunks.
inline Tensor<float> embed(const TaskModel<float>& task, const Tensor<float>& images, int chunk = 64) {
  Tensor<float> out;
  for (int first = 0; first < images.n(); first += chunk) {
    const Tensor<float> z = l2_normalize_rows(task.forward(images.slice(first, std::min(chunk, images.n() - first))).embedding);
    if (first == 0) out = Tensor<float>(images.n(), z.c(), z.h(), z.w());
    std::copy(z.data(), z.data() + z.size(), out.data() + static_cast<std::size_t>(first) * out.sample_size());
  }
  return out;
}

// Projection of the rows onto the two leading principal axes. Each axis is
// signed so its largest-magnitude coefficient is positive.
inline std::vector<std::array<double, 2>> pca2(const Tensor<float>& z) {
  const Eigen::Index n = z.n(), d = static_cast<Eigen::Index>(z.sample_size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = z.sample(static_cast<int>(i))[k];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / std::max<Eigen::Index>(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::MatrixXd axes(d, 2);
  for (int a = 0; a < 2; ++a) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
    if (d > a) v = es.eigenvectors().col(d - 1 - a);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(a) = v;
  }
  const Eigen::MatrixXd p = x * axes;
  std::vector<std::array<double, 2>> out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = {p(i, 0), p(i, 1)};
  return out;
}

struct Split {
  std::vector<eval::PredictionRecord> closed, open;
};

inline Split split_records(const std::vector<eval::PredictionRecord>& records) {
  Split s;
  for (const auto& r : records) (r.is_closed() ? s.closed : s.open).push_back(r);
  return s;
}

struct OperatingPoint {
  double ccr = 0.0;  // closed samples accepted and correctly classified
  double fpr = 0.0;  // open samples accepted
  double open_set_accuracy = 0.0;
};

inline OperatingPoint operating_point(const Split& s, double theta) {
  std::size_t c = 0, o = 0;
  for (const auto& r : s.closed) c += eval::decide(r.scores, theta) == r.true_label;
  for (const auto& r : s.open) o += eval::decide(r.scores, theta) != eval::kUnknown;
  OperatingPoint p;
  p.ccr = s.closed.empty() ? 0.0 : static_cast<double>(c) / s.closed.size();
  p.fpr = s.open.empty() ? 0.0 : static_cast<double>(o) / s.open.size();
  p.open_set_accuracy = static_cast<double>(c + s.open.size() - o) / (s.closed.size() + s.open.size());
  return p;
}

// ---------------------------------------------------------------------------
// Option plumbing: config file, --set assignments and per-command flags.

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::vector<Json> flags;  // dedicated flags, applied last
};

inline std::string absolute_from_cwd(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

inline config::RunConfig resolve(const Options& o) {
  std::vector<Json> overrides;
  for (const auto& s : o.sets) overrides.push_back(config::parse_assignment(s));
  overrides.insert(overrides.end(), o.flags.begin(), o.flags.end());
  return config::load(o.config.empty() ? std::nullopt : std::optional<fs::path>(o.config), overrides);
}

inline Json at_path(const std::string& section, const std::string& key, Json value) {
  return Json{{section, Json{{key, std::move(value)}}}};
}

// Fixes the command's output directory in the document so a rerun from the
// resolved copy writes to the same place.
inline fs::path pin_out_dir(config::RunConfig& rc, const fs::path& fallback) {
  std::string out = rc.doc["paths"]["out_dir"];
  if (out.empty()) out = fallback.lexically_normal().string();
  rc.doc["paths"]["out_dir"] = out;
  return out;
}

// ---------------------------------------------------------------------------
// bench-gen

inline int cmd_bench_gen(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const bench::BenchSpec spec = config::bench_spec(rc);
  const fs::path dir = rc.path("bench_dir");
  make_dir(dir);
  std::string previous;
  if (fs::exists(bench::meta_path(dir / kManifestName))) {
    try {
      previous = ckpt::read_json(bench::meta_path(dir / kManifestName)).value("checksum", "");
    } catch (const IoError&) {
    }
  }
  const bench::BenchmarkManifest m = bench::build_benchmark(spec, dir);
  config::write_resolved(rc, dir);

  out << "manifest " << (dir / kManifestName).string() << "\n";
  out << "known classes " << m.num_known << ":";
  for (const auto& n : m.known_class_names) out << " " << n;
  out << "\n";
  const auto groups = bench::summarize(m);
  auto line = [&](const std::string& g) {
    const auto it = groups.find(g);
    const std::size_t tr = it == groups.end() || !it->second.count("train") ? 0 : it->second.at("train");
    const std::size_t te = it == groups.end() || !it->second.count("test") ? 0 : it->second.at("test");
    out << "  " << g << ": train " << tr << " test " << te << "\n";
  };
  out << "record groups\n";
  for (const char* g : {"seen_real", "seen_fake", "unseen_real", "unseen_fake"}) line(g);
  out << "unseen fake by type\n";
  for (const char* g : {"unseen_seed", "unseen_architecture", "unseen_dataset"}) line(g);
  if (!previous.empty() && previous == m.checksum) out << "identical checksum " << m.checksum << "\n";
  else out << "checksum " << m.checksum << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const bench::BenchmarkManifest m = load_bench(rc.path("bench_dir"));
  const train::TrainConfig cfg = config::train_config(rc, m.input_size);
  const bench::LabeledImages tr = bench::load_split(m, rc.path("bench_dir"), "train");
  const fs::path run = rc.path("run_dir");
  make_dir(run);
  std::error_code ec;
  fs::remove_all(run / "checkpoints", ec);
  config::write_resolved(rc, run);
  const auto state = train::train_pose(train::training_data(tr, m.num_known), cfg, run);
  for (const auto& h : state->history) {
    out << "epoch " << h.epoch << " task_loss " << h.task.mean_loss << " train_acc " << h.task.train_accuracy;
    if (!h.aug.empty()) out << " aug_mse " << h.aug.back().final_raw_mse;
    out << "\n";
  }
  out << "mode " << train::to_string(cfg.mode) << " augmentation models " << state->pool.size() << "\n";
  out << "run " << run.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

inline int cmd_eval(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const Json& ev = rc.section("eval");
  const train::LoadedRun run = load_run(rc);
  const bench::BenchmarkManifest m = load_bench(rc.path("bench_dir"));
  check_input_size(run.task, m);
  const bench::LabeledImages te = bench::load_split(m, rc.path("bench_dir"), "test");
  const fs::path dir = pin_out_dir(rc, rc.path("run_dir") / "eval");
  make_dir(dir);

  const auto records = eval::predict_records(run.task, te.images, te.labels, te.types);
  const eval::MetricsReport rep = eval::evaluate(records, m.num_known);
  const Split split = split_records(records);
  const double theta = ev.at("theta");
  const OperatingPoint op = operating_point(split, theta);

  Json metrics;
  metrics["accuracy"] = metric(rep.accuracy);
  metrics["auc_seed"] = metric(rep.auc_by_type.at("seed"));
  metrics["auc_architecture"] = metric(rep.auc_by_type.at("architecture"));
  metrics["auc_dataset"] = metric(rep.auc_by_type.at("dataset"));
  metrics["auc_all"] = metric(rep.auc_all);
  metrics["oscr_all"] = metric(rep.oscr_all);
  metrics["theta"] = theta;
  metrics["ccr_at_theta"] = op.ccr;
  metrics["fpr_at_theta"] = op.fpr;
  metrics["open_set_accuracy_at_theta"] = op.open_set_accuracy;
  write_json_file(dir / "metrics.json", metrics);

  {
    std::string conf = "true";
    for (int c = 0; c < m.num_known; ++c) conf += "," + m.known_class_names[c];
    conf += "\n";
    for (int t = 0; t < m.num_known; ++t) {
      conf += m.known_class_names[t];
      for (int p = 0; p < m.num_known; ++p) conf += "," + std::to_string(rep.confusion[t][p]);
      conf += "\n";
    }
    write_text(dir / "confusion.csv", conf);
  }

  const int bins = ev.at("histogram_bins");
  for (const auto& h : eval::confidence_histogram(records, bins)) {
    std::string csv = "bin_lo,bin_hi,count\n";
    for (int b = 0; b < bins; ++b)
      csv += fmt(static_cast<double>(b) / bins) + "," + fmt(static_cast<double>(b + 1) / bins) + "," +
             std::to_string(h.counts[b]) + "\n";
    write_text(dir / ("hist_" + h.group + ".csv"), csv);
    plot::histogram(dir / ("hist_" + h.group + ".svg"), {"confidence: " + h.group, "max softmax", "count"}, h.counts,
                    0.0, 1.0);
  }

  const auto curve = eval::oscr_curve(split.closed, split.open);
  {
    std::string csv = "fpr,ccr\n";
    plot::Series s{"OSCR " + plot::num(rep.oscr_all)};
    for (const auto& [f, c] : curve) {
      csv += fmt(f) + "," + fmt(c) + "\n";
      s.x.push_back(f);
      s.y.push_back(c);
    }
    write_text(dir / "ccr_fpr.csv", csv);
    plot::Axes a{"CCR vs FPR", "false positive rate (open)", "correct classification rate (closed)", 0, 1, 0, 1};
    plot::line_chart(dir / "ccr_fpr.svg", a, {s});
  }

  {
    const auto pts = pca2(embed(run.task, te.images));
    std::string csv = "pc1,pc2,group,class\n";
    plot::Series closed{"closed"}, open{"open"};
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const bool is_closed = te.labels[i] != eval::kUnknown;
      csv += fmt(pts[i][0]) + "," + fmt(pts[i][1]) + "," + (is_closed ? "closed," : "open,") + te.class_names[i] + "\n";
      auto& s = is_closed ? closed : open;
      s.x.push_back(pts[i][0]);
      s.y.push_back(pts[i][1]);
    }
    write_text(dir / "pca.csv", csv);
    plot::scatter(dir / "pca.svg", {"embedding PCA", "PC1", "PC2"}, {closed, open});
  }

  const int sweep = ev.at("theta_sweep");
  if (sweep > 0) {
    std::string csv = "theta,ccr,fpr,open_set_accuracy\n";
    for (int i = 0; i <= sweep; ++i) {
      const double t = static_cast<double>(i) / sweep;
      const OperatingPoint p = operating_point(split, t);
      csv += fmt(t) + "," + fmt(p.ccr) + "," + fmt(p.fpr) + "," + fmt(p.open_set_accuracy) + "\n";
    }
    write_text(dir / "theta_sweep.csv", csv);
  }
  config::write_resolved(rc, dir);

  out << metrics.dump() << "\n";
  out << "outputs " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// spectrum

inline void write_profile(const fs::path& path, const spectrum::SpectrumProfile& p) {
  std::ostringstream os;
  spectrum::write_profile_csv(os, p);
  write_text(path, os.str());
}

inline plot::Series profile_series(const std::string& label, const spectrum::SpectrumProfile& p) {
  plot::Series s{label};
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.x.push_back(static_cast<double>(i));
    s.y.push_back(std::log10(std::max(p.values[i], 1e-30)));
  }
  return s;
}

inline int cmd_spectrum(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const Json& sp = rc.section("spectrum");
  const std::string a_path = sp.at("corpus_a"), b_path = sp.at("corpus_b");
  if (a_path.empty() || b_path.empty()) throw ConfigError("spectrum needs corpus_a and corpus_b");
  const Tensor<float> a = bench::load_image_folder(a_path);
  const Tensor<float> b = bench::load_image_folder(b_path);
  if (a.h() != b.h() || a.w() != b.w())
    throw InvalidInput("resolution mismatch: " + a_path + " is " + std::to_string(a.h()) + " px, " + b_path + " is " +
                       std::to_string(b.h()) + " px");
  const bool normalize = sp.at("normalize");
  const fs::path dir = pin_out_dir(rc, config::output_base(rc.config_dir) / "spectrum");
  make_dir(dir);

  const auto pa = spectrum::mean_profile(a, normalize), pb = spectrum::mean_profile(b, normalize);
  write_profile(dir / "profile_a.csv", pa);
  write_profile(dir / "profile_b.csv", pb);
  std::vector<plot::Series> series{profile_series("corpus a", pa), profile_series("corpus b", pb)};

  Json summary;
  summary["corpus_a"] = a_path;
  summary["corpus_b"] = b_path;
  summary["images_a"] = a.n();
  summary["images_b"] = b.n();
  summary["size"] = a.h();
  summary["normalized"] = normalize;
  summary["profile_distance"] = spectrum::profile_distance(pa, pb);

  if (sp.at("fit").get<bool>()) {
    train::FeasibilityConfig fc;
    fc.steps = sp.at("fit_steps");
    fc.batch = sp.at("fit_batch");
    fc.lr = sp.at("fit_lr");
    fc.seed = sp.at("seed").get<std::uint64_t>();
    fc.arch = aug_arch_from_tag(rc.section("train").at("aug_arch"));
    fc.arch.hidden = rc.section("train").at("aug_hidden");
    fc.loss = config::loss_config(rc);
    const auto [model, rep] = train::spectral_feasibility(a, b, fc);
    summary["fit"] = train::to_json(rep);
    const auto pf = spectrum::mean_profile(model.forward(a), normalize);
    write_profile(dir / "profile_fit.csv", pf);
    series.push_back(profile_series("A(corpus a)", pf));
    ckpt::save_augmentation_model(dir / "fit_model", model, 0, {{"final_distance", rep.final_distance}});
  }
  plot::line_chart(dir / "profiles.svg", {"mean azimuthal power", "radius bin", "log10 power"}, series);
  write_json_file(dir / "summary.json", summary);
  config::write_resolved(rc, dir);
  out << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// cluster

inline int cmd_cluster(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const Json& cl = rc.section("cluster");
  const train::LoadedRun run = load_run(rc);
  const bench::BenchmarkManifest m = load_bench(rc.path("bench_dir"));
  check_input_size(run.task, m);
  const bench::LabeledImages te = bench::load_split(m, rc.path("bench_dir"), "test");

  std::map<std::string, int> ids;
  std::vector<int> labels;
  for (const auto& c : te.class_names) labels.push_back(ids.emplace(c, static_cast<int>(ids.size())).first->second);
  const int k = cl.at("k").get<int>() == 0 ? static_cast<int>(ids.size()) : cl.at("k").get<int>();
  const fs::path dir = pin_out_dir(rc, rc.path("run_dir") / "cluster");

  const Tensor<float> z = embed(run.task, te.images);
  std::vector<std::vector<double>> features(z.n());
  for (int i = 0; i < z.n(); ++i) features[i].assign(z.sample(i).begin(), z.sample(i).end());
  const auto scores = eval::cluster_metrics(features, labels, k, cl.at("seed").get<std::uint64_t>());

  make_dir(dir);
  Json j;
  j["k"] = k;
  j["seed"] = cl.at("seed");
  j["samples"] = z.n();
  j["classes"] = ids.size();
  j["purity"] = scores.purity;
  j["nmi"] = scores.nmi;
  j["ari"] = scores.ari;
  write_json_file(dir / "cluster.json", j);
  config::write_resolved(rc, dir);
  out << j.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// robustness

inline std::vector<double> strengths(const Json& rb, bench::PerturbKind kind) {
  std::vector<double> s = rb.at("strengths").get<std::vector<double>>();
  if (!s.empty()) return s;
  const int levels = rb.at("levels");
  const double hi = bench::strength_range(kind).second;
  for (int i = 0; i < levels; ++i) s.push_back(hi * i / (levels - 1));
  return s;
}

struct RobustnessRow {
  double strength = 0.0;
  double oscr = 0.0;
  double auc_all = 0.0;
  double accuracy = 0.0;
};

inline std::vector<RobustnessRow> sweep(const TaskModel<float>& task, const bench::LabeledImages& te, int num_known,
                                        bench::PerturbKind kind, const std::vector<double>& levels, std::uint64_t seed) {
  std::vector<RobustnessRow> rows;
  for (double s : levels) {
    const Tensor<float> x = bench::perturb(te.images, kind, s, seed);
    const auto rep = eval::evaluate(eval::predict_records(task, x, te.labels, te.types), num_known);
    rows.push_back({s, rep.oscr_all, rep.auc_all, rep.accuracy});
  }
  return rows;
}

inline bool non_increasing(const std::vector<RobustnessRow>& rows) {
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].oscr > rows[i - 1].oscr) return false;
  return true;
}

inline int cmd_robustness(const Options& o, std::ostream& out) {
  config::RunConfig rc = resolve(o);
  const Json& rb = rc.section("robustness");
  const auto kind = bench::perturb_kind_from_string(rb.at("kind"));
  const std::vector<double> levels = strengths(rb, kind);
  const std::uint64_t seed = rb.at("seed").get<std::uint64_t>();
  const train::LoadedRun run = load_run(rc);
  const bench::BenchmarkManifest m = load_bench(rc.path("bench_dir"));
  check_input_size(run.task, m);
  const bench::LabeledImages te = bench::load_split(m, rc.path("bench_dir"), "test");
  const fs::path dir = pin_out_dir(rc, rc.path("run_dir") / ("robustness_" + rb.at("kind").get<std::string>()));
  make_dir(dir);

  const auto clean = eval::evaluate(eval::predict_records(run.task, te.images, te.labels, te.types), m.num_known);
  const auto rows = sweep(run.task, te, m.num_known, kind, levels, seed);

  std::optional<std::vector<RobustnessRow>> immunized;
  if (rb.at("immunized").get<bool>()) {
    // Retrain with the run's own configuration plus train-time perturbation.
    const fs::path source = rc.path("run_dir") / config::kResolvedName;
    config::RunConfig base = fs::exists(source) ? config::load(source) : rc;
    Json& im = base.doc["train"]["immunize"];
    im["kind"] = rb.at("kind");
    im["max_strength"] = *std::max_element(levels.begin(), levels.end());
    im["probability"] = rb.at("immunize_probability");
    base.doc["paths"]["run_dir"] = (dir / "immunized_run").string();
    const train::TrainConfig cfg = config::train_config(base, m.input_size);
    const auto tr = bench::load_split(m, rc.path("bench_dir"), "train");
    config::write_resolved(base, dir / "immunized_run");
    const auto state = train::train_pose(train::training_data(tr, m.num_known), cfg, dir / "immunized_run");
    immunized = sweep(state->task, te, m.num_known, kind, levels, seed);
  }

  std::string csv = immunized ? "strength,oscr,auc_all,accuracy,oscr_immunized\n" : "strength,oscr,auc_all,accuracy\n";
  plot::Series orig{"original"}, imm{"immunized"};
  Json table = Json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    csv += fmt(r.strength) + "," + fmt(r.oscr) + "," + fmt(r.auc_all) + "," + fmt(r.accuracy);
    Json row{{"strength", r.strength}, {"oscr", r.oscr}, {"auc_all", r.auc_all}, {"accuracy", r.accuracy}};
    orig.x.push_back(r.strength);
    orig.y.push_back(r.oscr);
    if (immunized) {
      csv += "," + fmt((*immunized)[i].oscr);
      row["oscr_immunized"] = (*immunized)[i].oscr;
      imm.x.push_back(r.strength);
      imm.y.push_back((*immunized)[i].oscr);
    }
    csv += "\n";
    table.push_back(std::move(row));
  }
  write_text(dir / "robustness.csv", csv);
  std::vector<plot::Series> series{orig};
  if (immunized) series.push_back(imm);
  plot::line_chart(dir / "robustness.svg", {"OSCR under " + rb.at("kind").get<std::string>(), "strength", "OSCR"},
                   series);

  Json summary;
  summary["kind"] = rb.at("kind");
  summary["unperturbed_oscr"] = clean.oscr_all;
  summary["rows"] = table;
  summary["monotone_degradation"] = non_increasing(rows);
  if (immunized) summary["monotone_degradation_immunized"] = non_increasing(*immunized);
  write_json_file(dir / "robustness.json", summary);
  config::write_resolved(rc, dir);

  out << "kind " << rb.at("kind").get<std::string>() << " unperturbed oscr " << clean.oscr_all << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << "strength " << rows[i].strength << " oscr " << rows[i].oscr;
    if (immunized) out << " immunized " << (*immunized)[i].oscr;
    out << "\n";
  }
  out << "monotone degradation: " << (non_increasing(rows) ? "yes" : "no") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Open-set model attribution toolkit"};
  app.require_subcommand(0, 1);
  bool print_schema = false;
  app.add_flag("--schema", print_schema, "print the configuration schema and exit");

  struct Command {
    CLI::App* app;
    Options opts;
    int (*fn)(const Options&, std::ostream&);
  };
  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&](const std::string& name, const std::string& help, int (*fn)(const Options&, std::ostream&)) {
    auto c = std::make_unique<Command>(Command{app.add_subcommand(name, help), {}, fn});
    c->app->add_option("-c,--config", c->opts.config, "JSON run configuration")->check(CLI::ExistingFile);
    c->app->add_option("--set", c->opts.sets, "override, e.g. train.epochs=5 (repeatable)");
    commands.push_back(std::move(c));
    return commands.back().get();
  };
  // Flag values land in these and are converted to overrides after parsing.
  std::map<std::string, std::string> paths;
  std::optional<std::string> mode, checkpoint, kind, corpus_a, corpus_b;
  std::optional<long long> epochs, seed, k, theta_sweep, fit_steps;
  std::optional<double> theta;
  std::vector<double> levels;
  bool fit = false, immunized = false;

  auto path_flag = [&](Command* c, const std::string& flag, const std::string& key, const std::string& help) {
    c->app->add_option_function<std::string>(flag, [&, key](const std::string& v) { paths[key] = v; }, help);
  };

  auto* bench_gen = add("bench-gen", "generate the synthetic benchmark", cmd_bench_gen);
  path_flag(bench_gen, "-o,--out", "bench_dir", "benchmark output directory");

  auto* train_cmd = add("train", "train a task model (and augmentation pool)", cmd_train);
  path_flag(train_cmd, "--bench", "bench_dir", "benchmark directory");
  path_flag(train_cmd, "--run-dir", "run_dir", "run output directory");
  train_cmd->app->add_option("--mode", mode, "pose | base | pose-nodiv | joint");
  train_cmd->app->add_option("--epochs", epochs, "training epochs");
  train_cmd->app->add_option("--seed", seed, "training seed");

  auto* eval_cmd = add("eval", "evaluate a checkpoint on the test split", cmd_eval);
  path_flag(eval_cmd, "--bench", "bench_dir", "benchmark directory");
  path_flag(eval_cmd, "--run-dir", "run_dir", "run directory");
  path_flag(eval_cmd, "-o,--out", "out_dir", "output directory");
  eval_cmd->app->add_option("--theta", theta, "rejection threshold");
  eval_cmd->app->add_option("--checkpoint", checkpoint, "final, an epoch number, or a directory");
  eval_cmd->app->add_option("--theta-sweep", theta_sweep, "emit an accuracy-vs-theta table with N+1 rows");

  auto* spec_cmd = add("spectrum", "compare mean spectra of two image folders", cmd_spectrum);
  spec_cmd->app->add_option("--a", corpus_a, "first image folder");
  spec_cmd->app->add_option("--b", corpus_b, "second image folder");
  path_flag(spec_cmd, "-o,--out", "out_dir", "output directory");
  spec_cmd->app->add_flag("--fit", fit, "fit an augmentation model mapping a's spectrum onto b's");
  spec_cmd->app->add_option("--steps", fit_steps, "fit steps");

  auto* cluster_cmd = add("cluster", "k-means on test embeddings", cmd_cluster);
  path_flag(cluster_cmd, "--bench", "bench_dir", "benchmark directory");
  path_flag(cluster_cmd, "--run-dir", "run_dir", "run directory");
  path_flag(cluster_cmd, "-o,--out", "out_dir", "output directory");
  cluster_cmd->app->add_option("--k", k, "cluster count (0: number of test classes)");
  cluster_cmd->app->add_option("--seed", seed, "k-means seed");
  cluster_cmd->app->add_option("--checkpoint", checkpoint, "final, an epoch number, or a directory");

  auto* robust_cmd = add("robustness", "OSCR under test-time perturbations", cmd_robustness);
  path_flag(robust_cmd, "--bench", "bench_dir", "benchmark directory");
  path_flag(robust_cmd, "--run-dir", "run_dir", "run directory");
  path_flag(robust_cmd, "-o,--out", "out_dir", "output directory");
  robust_cmd->app->add_option("--kind", kind, "blur | jpeg | lighting | noise | crop_resize");
  robust_cmd->app->add_option("--strengths", levels, "perturbation strengths");
  robust_cmd->app->add_option("--seed", seed, "perturbation seed");
  robust_cmd->app->add_flag("--immunized", immunized, "also retrain with the perturbation at train time");
  robust_cmd->app->add_option("--checkpoint", checkpoint, "final, an epoch number, or a directory");

  if (argc <= 1) {
    err << app.help();
    return kUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }
  if (print_schema) {
    out << config::run_schema().dump(2) << "\n";
    return kOk;
  }

  for (auto& c : commands) {
    if (!c->app->parsed()) continue;
    auto& f = c->opts.flags;
    const std::string name = c->app->get_name();
    for (const auto& [key, v] : paths) f.push_back(at_path("paths", key, absolute_from_cwd(v)));
    if (mode) f.push_back(at_path("train", "mode", *mode));
    if (epochs) f.push_back(at_path("train", "epochs", *epochs));
    if (seed) {
      const char* section = name == "train" ? "train" : name == "cluster" ? "cluster" : "robustness";
      f.push_back(at_path(section, "seed", *seed));
    }
    if (theta) f.push_back(at_path("eval", "theta", *theta));
    if (theta_sweep) f.push_back(at_path("eval", "theta_sweep", *theta_sweep));
    if (checkpoint) f.push_back(at_path("eval", "checkpoint", *checkpoint));
    if (corpus_a) f.push_back(at_path("spectrum", "corpus_a", absolute_from_cwd(*corpus_a)));
    if (corpus_b) f.push_back(at_path("spectrum", "corpus_b", absolute_from_cwd(*corpus_b)));
    if (fit) f.push_back(at_path("spectrum", "fit", true));
    if (fit_steps) f.push_back(at_path("spectrum", "fit_steps", *fit_steps));
    if (k) f.push_back(at_path("cluster", "k", *k));
    if (kind) f.push_back(at_path("robustness", "kind", *kind));
    if (!levels.empty()) f.push_back(at_path("robustness", "strengths", levels));
    if (immunized) f.push_back(at_path("robustness", "immunized", true));
    try {
      return c->fn(c->opts, out);
    } catch (const ConfigError& e) {
      err << "error: " << e.what() << "\n";
      return kUsage;
    } catch (const DivergenceError& e) {
      err << "error: " << e.what() << "\n";
      return kDiverged;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kFailure;
    }
  }
  return kUsage;
}

}  // namespace pose::cli
