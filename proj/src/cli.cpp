#include "uaom/cli.hpp"

#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "uaom/evalkit.hpp"
#include "uaom/image_io.hpp"
#include "uaom/pipeline.hpp"

namespace uaom::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

/// Input problems detected before any compute; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string weights_path;
  std::string desc_weights_path;
  std::string out_dir = ".";
  PipelineConfig pipeline;
};

void add_pipeline_flags(CLI::App& app, RunConfig& rc, bool with_descriptor) {
  PipelineConfig& p = rc.pipeline;
  AnalogyConfig& a = p.analogy;
  app.add_option("--weights", rc.weights_path, "backbone container (default $UAOM_WEIGHTS_DIR/backbone.uaom)");
  if (with_descriptor) {
    app.add_option("--desc-weights", rc.desc_weights_path,
                   "descriptor container (default $UAOM_WEIGHTS_DIR/descriptor.uaom)");
    app.add_option("--ratio", p.ratio, "ratio-test threshold")->capture_default_str();
    app.add_option("--ransac-thresh-px", p.ransac_thresh_px, "RANSAC symmetric error threshold")
        ->capture_default_str();
    app.add_option("--ransac-max-iters", p.ransac_max_iters)->capture_default_str();
    app.add_option("--dedup-radius", p.dedup_radius, "fusion de-duplication radius in px")->capture_default_str();
    app.add_option("--max-keypoints", p.detector.max_keypoints)->capture_default_str();
    app.add_option("--detector-threshold", p.detector.threshold)->capture_default_str();
  }
  app.add_option("--levels", a.levels)->capture_default_str();
  app.add_option("--max-side", p.max_side, "long-side limit before processing")->capture_default_str();
  app.add_option("--seed", p.seed)->capture_default_str();
  app.add_option("--out-dir", rc.out_dir)->capture_default_str();
  app.add_option("--alpha", a.alpha, "content weights for levels 1..4")->expected(4);
  app.add_option("--weight-kappa", a.weight_kappa)->capture_default_str();
  app.add_option("--weight-tau", a.weight_tau)->capture_default_str();
  app.add_option("--patch-radius", a.patch_radius, "PatchMatch radius for levels 1..5")->expected(5);
  app.add_option("--pm-iterations", a.pm_iterations)->capture_default_str();
  app.add_option("--pm-search-radius", a.search_radius, "random-search radius below the coarsest level (0: whole grid)")
      ->capture_default_str();
  app.add_option("--deconv-iterations", a.deconv_iterations)->capture_default_str();
  app.add_option("--deconv-step", a.deconv_step)->capture_default_str();
  app.add_flag("--fixed-clock", p.fixed_clock, "report all timings as 0 for byte-identical output");
}

std::string resolve_weights(const std::string& given, const char* file, const char* flag) {
  if (!given.empty()) return given;
  if (const char* dir = std::getenv("UAOM_WEIGHTS_DIR")) return (fs::path(dir) / file).string();
  throw UsageError(std::string("no ") + flag + " given and UAOM_WEIGHTS_DIR is unset");
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

NetworkModel load_checked(const std::string& path, const char* what) {
  require_file(path, what);
  try {
    return load_model(path);
  } catch (const ModelFormatError& e) {
    throw UsageError(std::string(what) + " " + path + " is invalid: " + e.what());
  }
}

void prepare(RunConfig& rc, bool with_descriptor) {
  rc.weights_path = resolve_weights(rc.weights_path, "backbone.uaom", "--weights");
  if (with_descriptor) rc.desc_weights_path = resolve_weights(rc.desc_weights_path, "descriptor.uaom", "--desc-weights");
  try {
    rc.pipeline.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  require_file(rc.weights_path, "backbone weights");
  if (with_descriptor) require_file(rc.desc_weights_path, "descriptor weights");
  std::error_code ec;
  fs::create_directories(rc.out_dir, ec);
  if (ec) throw UsageError("cannot create output directory " + rc.out_dir + ": " + ec.message());
}

ordered_json config_json(const RunConfig& rc, const std::string& command) {
  const PipelineConfig& p = rc.pipeline;
  const AnalogyConfig& a = p.analogy;
  ordered_json j;
  j["command"] = command;
  j["weights_path"] = rc.weights_path;
  j["desc_weights_path"] = rc.desc_weights_path;
  j["out_dir"] = rc.out_dir;
  j["ratio"] = p.ratio;
  j["ransac_thresh_px"] = p.ransac_thresh_px;
  j["ransac_max_iters"] = p.ransac_max_iters;
  j["dedup_radius"] = p.dedup_radius;
  j["max_keypoints"] = p.detector.max_keypoints;
  j["detector_threshold"] = p.detector.threshold;
  j["levels"] = a.levels;
  j["max_side"] = p.max_side;
  j["seed"] = p.seed;
  j["alpha"] = a.alpha;
  j["weight_kappa"] = a.weight_kappa;
  j["weight_tau"] = a.weight_tau;
  j["patch_radius"] = a.patch_radius;
  j["pm_iterations"] = a.pm_iterations;
  j["deconv_iterations"] = a.deconv_iterations;
  j["deconv_step"] = a.deconv_step;
  j["fixed_clock"] = p.fixed_clock;
  return j;
}

ordered_json record_json(const EvalRecord& r) {
  ordered_json j;
  j["pair_id"] = r.pair_id;
  j["method"] = r.method;
  j["gm"] = r.gm;
  j["inl"] = r.inl;
  j["ma"] = r.ma;
  j["rt_seconds"] = r.rt_seconds;
  j["transfer_seconds"] = r.transfer_seconds;
  j["degenerate"] = r.degenerate;
  j["gm_pre_cross_check"] = r.gm_pre_cross_check;
  j["runs"] = r.runs;
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_image(const std::string& path, const char* what) {
  require_file(path, what);
  try {
    return read_png(path);
  } catch (const ImageIoError& e) {
    throw UsageError(e.what());
  }
}

// Fraction of flagged inliers within `thresh` of a known transform.
double ground_truth_precision(const MatchSet& set, const Mat3& h, double thresh) {
  std::size_t flagged = 0, good = 0;
  for (std::size_t i = 0; i < set.matches.size(); ++i) {
    if (!set.inlier_flags[i]) continue;
    ++flagged;
    if (symmetric_error(h, set.matches[i].pt_a, set.matches[i].pt_b) < thresh) ++good;
  }
  return flagged ? static_cast<double>(good) / static_cast<double>(flagged) : 0.0;
}

int cmd_transfer(RunConfig& rc, const std::string& path_a, const std::string& path_b, std::ostream& out) {
  prepare(rc, false);
  const Tensor a = read_image(path_a, "image A");
  const Tensor b = read_image(path_b, "image B");
  const NetworkModel backbone = load_checked(rc.weights_path, "backbone weights");

  const TransferResult t = transfer(a, b, backbone, rc.pipeline);
  const fs::path dir(rc.out_dir);
  write_png(dir / "a_prime.png", t.a_prime);
  write_png(dir / "b_prime.png", t.b_prime);

  ordered_json j;
  j["config"] = config_json(rc, "transfer");
  j["image_a"] = path_a;
  j["image_b"] = path_b;
  j["scale_a"] = t.scale_a;
  j["scale_b"] = t.scale_b;
  j["transfer_seconds"] = t.seconds;
  ordered_json levels = ordered_json::array();
  for (const LevelReport& l : t.analogy.levels) {
    ordered_json lj;
    lj["level"] = l.level;
    lj["cost_ab"] = l.cost_ab;
    lj["cost_ba"] = l.cost_ba;
    lj["mean_weight_a"] = l.mean_weight_a;
    lj["mean_weight_b"] = l.mean_weight_b;
    lj["deconv_final_a"] = l.deconv_trace_a.empty() ? 0.0 : l.deconv_trace_a.back();
    lj["deconv_final_b"] = l.deconv_trace_b.empty() ? 0.0 : l.deconv_trace_b.back();
    levels.push_back(lj);
  }
  j["levels"] = levels;
  write_text(dir / "transfer.json", j.dump(2) + "\n");
  out << "wrote " << (dir / "a_prime.png").string() << " and " << (dir / "b_prime.png").string() << "\n";
  return kExitOk;
}

int cmd_match(RunConfig& rc, const std::string& path_a, const std::string& path_b, const std::string& pair_id,
              std::ostream& out) {
  prepare(rc, true);
  const Tensor a = read_image(path_a, "image A");
  const Tensor b = read_image(path_b, "image B");
  const NetworkModel backbone = load_checked(rc.weights_path, "backbone weights");
  const NetworkModel desc = load_checked(rc.desc_weights_path, "descriptor weights");

  PairResult r = evaluate_pair(a, b, backbone, desc, rc.pipeline);
  r.record.pair_id = pair_id;
  const fs::path dir(rc.out_dir);
  write_text(dir / "matches.jsonl", matches_to_json_lines(r.fused));
  render_matches(to_gray(a), to_gray(b), r.fused, dir / "matches.png");
  write_png(dir / "a_prime.png", r.transfer.a_prime);
  write_png(dir / "b_prime.png", r.transfer.b_prime);

  ordered_json j;
  j["config"] = config_json(rc, "match");
  j["image_a"] = path_a;
  j["image_b"] = path_b;
  j["record"] = record_json(r.record);
  ordered_json stages;
  for (const auto& [k, v] : r.stage_seconds) stages[k] = v;
  j["stage_seconds"] = stages;
  if (r.fused.model) j["model"] = *r.fused.model;
  write_text(dir / "record.json", j.dump(2) + "\n");
  out << record_json(r.record).dump() << "\n";
  return kExitOk;
}

struct EntryOutcome {
  std::vector<EvalRecord> records;
  std::optional<double> gt_precision;
  std::string error;
};

EntryOutcome evaluate_entry(const ManifestEntry& e, const RunConfig& rc, const NetworkModel& backbone,
                            const NetworkModel& desc, bool with_raw) {
  EntryOutcome o;
  if (!e.error.empty()) {
    o.error = e.error;
    return o;
  }
  try {
    const Tensor a = read_png(e.path_a);
    const Tensor b = read_png(e.path_b);
    std::vector<EvalRecord> runs, raw_runs;
    double precision = 0.0;
    for (int run = 0; run < e.runs; ++run) {
      PipelineConfig cfg = rc.pipeline;
      cfg.seed = rc.pipeline.seed + static_cast<std::uint64_t>(run);
      PairResult r = evaluate_pair(a, b, backbone, desc, cfg);
      r.record.pair_id = e.pair_id;
      runs.push_back(r.record);
      if (e.expected_transform)
        precision += ground_truth_precision(r.fused, *e.expected_transform, rc.pipeline.ransac_thresh_px);
      if (with_raw) {
        PairResult raw = evaluate_raw_pair(a, b, desc, cfg);
        raw.record.pair_id = e.pair_id;
        raw_runs.push_back(raw.record);
      }
    }
    o.records.push_back(average_runs(runs));
    if (with_raw) o.records.push_back(average_runs(raw_runs));
    if (e.expected_transform) o.gt_precision = precision / e.runs;
  } catch (const std::exception& ex) {
    o.error = ex.what();
  }
  return o;
}

int cmd_eval(RunConfig& rc, const std::string& manifest_path, int jobs, bool with_raw, std::ostream& out) {
  prepare(rc, true);
  if (jobs < 1) throw UsageError("--jobs must be at least 1");
  PairManifest manifest;
  try {
    manifest = load_manifest(manifest_path);
  } catch (const ManifestError& e) {
    throw UsageError(e.what());
  }
  const NetworkModel backbone = load_checked(rc.weights_path, "backbone weights");
  const NetworkModel desc = load_checked(rc.desc_weights_path, "descriptor weights");

  std::vector<EntryOutcome> outcomes(manifest.entries.size());
  const int n = static_cast<int>(manifest.entries.size());
#pragma omp parallel for schedule(dynamic) num_threads(jobs) if (jobs > 1)
  for (int i = 0; i < n; ++i)
    outcomes[static_cast<std::size_t>(i)] =
        evaluate_entry(manifest.entries[static_cast<std::size_t>(i)], rc, backbone, desc, with_raw);

  std::vector<EvalRecord> records;
  ordered_json entries = ordered_json::array();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    ordered_json ej;
    ej["pair_id"] = manifest.entries[i].pair_id;
    if (outcomes[i].error.empty()) {
      ++ok;
      ej["status"] = "ok";
      ordered_json recs = ordered_json::array();
      for (const EvalRecord& r : outcomes[i].records) {
        records.push_back(r);
        recs.push_back(record_json(r));
      }
      ej["records"] = recs;
      if (outcomes[i].gt_precision) ej["ground_truth_inlier_precision"] = *outcomes[i].gt_precision;
    } else {
      ej["status"] = "failed";
      ej["error"] = outcomes[i].error;
    }
    entries.push_back(ej);
  }

  const fs::path dir(rc.out_dir);
  ordered_json report;
  report["config"] = config_json(rc, "eval");
  report["config"]["manifest"] = manifest_path;
  report["config"]["jobs"] = jobs;
  report["config"]["baseline"] = with_raw;
  report["entries"] = entries;
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "report.csv", records_to_csv(records));
  out << records_to_csv(records);
  return ok > 0 ? kExitOk : kExitRuntime;
}

int cmd_inspect_weights(const std::string& path, std::ostream& out) {
  require_file(path, "weights");
  LoadedModel lm;
  try {
    lm = load_model_with_references(path, LoadOptions{false, 1e-4});
  } catch (const ModelFormatError& e) {
    throw UsageError(path + " is invalid: " + e.what());
  }
  const NetworkModel& m = lm.model;
  ordered_json j;
  j["path"] = path;
  j["kind"] = m.kind;
  j["seed"] = m.seed;
  j["l2_normalize"] = m.l2_normalize_output;
  j["input_channels"] = m.input_spec.channels;
  ordered_json layers = ordered_json::array();
  for (const Layer& l : m.layers) {
    ordered_json lj;
    lj["name"] = l.name;
    if (l.kind == LayerKind::kMaxPool) {
      lj["type"] = "maxpool";
    } else {
      lj["type"] = "conv";
      lj["shape"] = {l.conv.out_channels, l.conv.in_channels, l.conv.kernel_h, l.conv.kernel_w};
      lj["stride"] = l.conv.stride;
      lj["padding"] = l.conv.padding;
      lj["relu"] = l.conv.has_relu;
    }
    layers.push_back(lj);
  }
  j["layers"] = layers;
  j["taps"] = m.tap_names;
  ordered_json refs = ordered_json::array();
  double worst = 0.0;
  for (const ReferenceCase& r : lm.references) {
    const double d = reference_deviation(m, r);
    worst = std::max(worst, d);
    refs.push_back(d);
  }
  j["reference_deviation"] = refs;
  out << j.dump(2) << "\n";
  return worst <= 1e-4 ? kExitOk : kExitRuntime;
}

int cmd_inspect_keypoints(const std::string& image, const DetectorConfig& det, const std::string& out_json,
                          std::ostream& out) {
  const Tensor g = to_gray(read_image(image, "image"));
  const auto kps = HessianDetector(det).detect(g);
  ordered_json arr = ordered_json::array();
  for (const Keypoint& k : kps)
    arr.push_back({{"x", k.x}, {"y", k.y}, {"scale", k.scale}, {"orientation", k.orientation}, {"response", k.response}});
  if (!out_json.empty()) write_text(out_json, arr.dump() + "\n");
  out << ordered_json{{"image", image}, {"keypoints", kps.size()}}.dump() << "\n";
  return kExitOk;
}

int cmd_make_synthetic(const std::string& out_dir, int count, int size, std::uint64_t seed, int runs,
                       std::ostream& out) {
  if (count < 1 || size < kMinPyramidSide) throw UsageError("need --count >= 1 and --size >= 32");
  fs::create_directories(out_dir);
  ordered_json pairs = ordered_json::array();
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed * 1000 + static_cast<std::uint64_t>(i);
    const Tensor base = make_base_scene(size, size, s);
    const Mat3 h = random_homography(size, size, s + 17);
    const SyntheticPair p = make_synthetic_pair(base, h, acoustic_gap(), s + 31);
    const std::string id = "syn" + std::to_string(i + 1);
    write_png(fs::path(out_dir) / (id + "_a.png"), p.img_a);
    write_png(fs::path(out_dir) / (id + "_b.png"), p.img_b);
    pairs.push_back({{"pair_id", id},
                     {"path_a", id + "_a.png"},
                     {"path_b", id + "_b.png"},
                     {"expected_transform", p.ground_truth},
                     {"runs", runs}});
  }
  write_text(fs::path(out_dir) / "manifest.json", ordered_json{{"pairs", pairs}}.dump(2) + "\n");
  out << "wrote " << count << " pairs to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Acoustic/optical image matching via deep-feature attribute transfer", "uaom"};
  app.require_subcommand(1);

  RunConfig transfer_rc, match_rc, eval_rc;
  std::string a_path, b_path, pair_id = "pair", manifest, weights, image, keypoints_out, syn_dir;
  int jobs = 1, syn_count = 5, syn_size = 192, syn_runs = 1;
  std::uint64_t syn_seed = 0;
  bool baseline = false;
  DetectorConfig det;

  auto* t = app.add_subcommand("transfer", "generate the latent images A' and B'");
  t->add_option("--image-a", a_path)->required();
  t->add_option("--image-b", b_path)->required();
  add_pipeline_flags(*t, transfer_rc, false);

  auto* m = app.add_subcommand("match", "transfer, match both directions, fuse and verify");
  m->add_option("--image-a", a_path)->required();
  m->add_option("--image-b", b_path)->required();
  m->add_option("--pair-id", pair_id)->capture_default_str();
  add_pipeline_flags(*m, match_rc, true);

  auto* e = app.add_subcommand("eval", "evaluate every pair of a manifest");
  e->add_option("--manifest", manifest)->required();
  e->add_option("--jobs", jobs, "manifest entries evaluated concurrently")->capture_default_str();
  e->add_flag("--baseline", baseline, "also report matching without transfer");
  add_pipeline_flags(*e, eval_rc, true);

  auto* iw = app.add_subcommand("inspect-weights", "summarise a weight container and check its references");
  iw->add_option("--weights", weights)->required();

  auto* ik = app.add_subcommand("inspect-keypoints", "run the detector on one image");
  ik->add_option("--image", image)->required();
  ik->add_option("--max-keypoints", det.max_keypoints)->capture_default_str();
  ik->add_option("--detector-threshold", det.threshold)->capture_default_str();
  ik->add_option("--out", keypoints_out, "write keypoints as JSON");

  auto* ms = app.add_subcommand("make-synthetic", "write seeded synthetic modality-gap pairs and a manifest");
  ms->add_option("--out-dir", syn_dir)->required();
  ms->add_option("--count", syn_count)->capture_default_str();
  ms->add_option("--size", syn_size)->capture_default_str();
  ms->add_option("--seed", syn_seed)->capture_default_str();
  ms->add_option("--runs", syn_runs, "runs recorded per manifest entry")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kExitUsage;
  }

  try {
    if (*t) return cmd_transfer(transfer_rc, a_path, b_path, out);
    if (*m) return cmd_match(match_rc, a_path, b_path, pair_id, out);
    if (*e) return cmd_eval(eval_rc, manifest, jobs, baseline, out);
    if (*iw) return cmd_inspect_weights(weights, out);
    if (*ik) return cmd_inspect_keypoints(image, det, keypoints_out, out);
    if (*ms) return cmd_make_synthetic(syn_dir, syn_count, syn_size, syn_seed, syn_runs, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace uaom::cli
