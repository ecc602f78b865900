#include "uaom/pipeline.hpp"

#include <chrono>

#include "uaom/image_io.hpp"

namespace uaom {

namespace {

class Stopwatch {
 public:
  explicit Stopwatch(bool fixed) : fixed_(fixed), start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    if (fixed_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool fixed_;
  std::chrono::steady_clock::time_point start_;
};

template <class F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

}  // namespace

void PipelineConfig::validate() const {
  analogy.validate();
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must lie in (0, 1]");
  if (!(ransac_thresh_px > 0.0)) throw std::invalid_argument("ransac threshold must be positive");
  if (ransac_max_iters < 1) throw std::invalid_argument("ransac iterations must be positive");
  if (!(dedup_radius >= 0.0)) throw std::invalid_argument("dedup radius must be non-negative");
  if (max_side < kMinPyramidSide) {
    throw std::invalid_argument("max side must be at least " + std::to_string(kMinPyramidSide));
  }
  if (detector.max_keypoints < 2) throw std::invalid_argument("need at least 2 keypoints per image");
}

TransferResult transfer(const Tensor& img_a, const Tensor& img_b, const NetworkModel& backbone,
                        const PipelineConfig& cfg) {
  TransferResult t;
  const Stopwatch sw(cfg.fixed_clock);
  t.img_a = limit_size(to_gray(img_a), cfg.max_side, t.scale_a);
  t.img_b = limit_size(to_gray(img_b), cfg.max_side, t.scale_b);
  AnalogyConfig acfg = cfg.analogy;
  acfg.rng_seed = cfg.seed;
  const int ch = backbone.input_spec.channels;
  t.analogy = stage("transfer", [&] {
    return run_analogy(replicate_channels(t.img_a, ch), replicate_channels(t.img_b, ch), backbone, acfg);
  });
  t.a_prime = channel_mean(t.analogy.latent_a);
  t.b_prime = channel_mean(t.analogy.latent_b);
  t.seconds = sw.seconds();
  return t;
}

DirectionalMatches match_images(const Tensor& gray_a, const Tensor& gray_b, const NetworkModel& desc_model,
                                const PipelineConfig& cfg, const std::string& tag) {
  const HessianDetector detector(cfg.detector);
  const auto kps_a = stage("detect", [&] { return detector.detect(gray_a); });
  const auto kps_b = stage("detect", [&] { return detector.detect(gray_b); });
  const PatchSet pa = extract_patches(gray_a, kps_a);
  const PatchSet pb = extract_patches(gray_b, kps_b);
  const DescriptorSet da = stage("describe", [&] { return describe(pa, desc_model); });
  const DescriptorSet db = stage("describe", [&] { return describe(pb, desc_model); });

  DirectionalMatches out;
  out.matches.src_tag = tag;
  out.keypoints_a = kps_a.size();
  out.keypoints_b = kps_b.size();
  if (da.rows() < 2 || db.rows() < 2) return out;

  const DistanceMatrix d = distance_matrix(da, db);
  const auto m_ab = ratio_match(d, cfg.ratio);
  const auto m_ba = ratio_match(d.transposed(), cfg.ratio);
  out.ratio_survivors = m_ab.size() + m_ba.size();
  auto kept = cross_check(m_ab, m_ba);
  for (Match& m : kept) {
    m.idx_a = pa.source[m.idx_a];
    m.idx_b = pb.source[m.idx_b];
  }
  attach_points(kept, kps_a, kps_b);
  out.matches.matches = std::move(kept);
  out.matches.inlier_flags.assign(out.matches.matches.size(), false);
  return out;
}

namespace {

RansacOptions ransac_options(const PipelineConfig& cfg) {
  RansacOptions o;
  o.thresh_px = cfg.ransac_thresh_px;
  o.max_iters = cfg.ransac_max_iters;
  o.seed = cfg.seed;
  return o;
}

void fill_record(PairResult& r, const std::string& method, double pre_cross) {
  r.record.method = method;
  r.record.gm = static_cast<double>(r.fused.matches.size());
  r.record.inl = static_cast<double>(r.fused.inlier_count());
  r.record.gm_pre_cross_check = pre_cross;
  finalize_record(r.record);
}

}  // namespace

PairResult evaluate_pair(const Tensor& img_a, const Tensor& img_b, const NetworkModel& backbone,
                         const NetworkModel& desc_model, const PipelineConfig& cfg) {
  cfg.validate();
  PairResult r;
  r.transfer = transfer(img_a, img_b, backbone, cfg);
  const TransferResult& t = r.transfer;

  const Stopwatch sw(cfg.fixed_clock);
  const DirectionalMatches opt = match_images(t.img_a, t.b_prime, desc_model, cfg, "A-B'");
  const DirectionalMatches ac = match_images(t.a_prime, t.img_b, desc_model, cfg, "A'-B");
  r.fused = stage("fuse", [&] {
    return fuse_and_project(opt.matches, ac.matches, t.scale_a, t.scale_b, cfg.dedup_radius, ransac_options(cfg));
  });
  r.record.rt_seconds = sw.seconds();
  r.record.transfer_seconds = t.seconds;
  fill_record(r, "uaom", static_cast<double>(opt.ratio_survivors + ac.ratio_survivors));
  r.stage_seconds["transfer"] = t.seconds;
  r.stage_seconds["pyramid"] = cfg.fixed_clock ? 0.0 : t.analogy.pyramid_seconds;
  r.stage_seconds["reconstruct"] = cfg.fixed_clock ? 0.0 : t.analogy.reconstruct_seconds;
  r.stage_seconds["matching"] = r.record.rt_seconds;
  return r;
}

PairResult evaluate_raw_pair(const Tensor& img_a, const Tensor& img_b, const NetworkModel& desc_model,
                             const PipelineConfig& cfg) {
  cfg.validate();
  PairResult r;
  TransferResult& t = r.transfer;
  t.img_a = limit_size(to_gray(img_a), cfg.max_side, t.scale_a);
  t.img_b = limit_size(to_gray(img_b), cfg.max_side, t.scale_b);

  const Stopwatch sw(cfg.fixed_clock);
  const DirectionalMatches direct = match_images(t.img_a, t.img_b, desc_model, cfg, "A-B");
  r.fused = stage("fuse", [&] {
    return fuse_and_project(direct.matches, MatchSet{}, t.scale_a, t.scale_b, cfg.dedup_radius, ransac_options(cfg));
  });
  r.record.rt_seconds = sw.seconds();
  fill_record(r, "raw", static_cast<double>(direct.ratio_survivors));
  r.stage_seconds["matching"] = r.record.rt_seconds;
  return r;
}

}  // namespace uaom
