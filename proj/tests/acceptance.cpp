// Acceptance run: prints one [PASS]/[FAIL] line per criterion, exits nonzero on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "deepem/checkpoint.hpp"
#include "deepem/em_engine.hpp"
#include "oracles.hpp"

using namespace deepem;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes.
constexpr double kMinSamplingGain = 0.01;  // one FROC point
constexpr int kBenchmarkSeeds = 5;
constexpr int kBenchFull = 40, kBenchWeak = 200, kBenchValidation = 40;
constexpr double kGradTol = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr int kGradInstances = 100;
constexpr double kPosteriorTol = 1e-9;
constexpr int kPosteriorInstances = 1000;
constexpr int kSamplingDraws = 100000;
constexpr double kTvTol = 0.01;
constexpr int kNmsSets = 1000;
constexpr int kNmsMaxProposals = 200;
constexpr double kSigmaRelTol = 0.05;
constexpr int kSigmaPairs = 10000;
constexpr int kFrocPerturbations = 500;
constexpr int kQSteps = 20;
constexpr int kMaxHalvings = 20;
constexpr double kQTol = 1e-9;

int failures = 0;

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void report(int id, bool ok, const std::string& detail) {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << "criterion " << id << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::vector<LabeledScan> make_split(std::uint64_t first, int n, const GeneratorConfig& g) {
  std::vector<LabeledScan> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_scan(first + std::uint64_t(i), g));
  return out;
}

double final_froc(const TrainingResult& r) { return r.history.back().froc.value_or(0.0); }

std::vector<Proposal> random_proposals(Rng& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> pos(lo, hi), diam(3.0, 9.0), logit(-6.0, 6.0);
  std::vector<Proposal> out;
  for (int i = 0; i < n; ++i) out.push_back({{Vec3(pos(rng), pos(rng), pos(rng)), diam(rng)}, logit(rng), i});
  return out;
}

// 1
void headline() {
  const auto t0 = std::chrono::steady_clock::now();
  const GeneratorConfig g;
  double b = 0, m = 0, smp = 0;
  std::string per_seed;
  for (int s = 1; s <= kBenchmarkSeeds; ++s) {
    const std::uint64_t base = std::uint64_t(s) * 100000;
    const auto full = make_split(base, kBenchFull, g);
    const auto weak = make_split(base + 1000, kBenchWeak, g);
    const auto val = make_split(base + 5000, kBenchValidation, g);
    EmConfig cfg;
    const double fb = final_froc(train_em(full, {}, val, cfg, std::uint64_t(s)));
    const double fm = final_froc(train_em(full, weak, val, cfg, std::uint64_t(s)));
    cfg.inference_mode = InferenceMode::Sampling;
    const double fs_ = final_froc(train_em(full, weak, val, cfg, std::uint64_t(s)));
    b += fb / kBenchmarkSeeds;
    m += fm / kBenchmarkSeeds;
    smp += fs_ / kBenchmarkSeeds;
    per_seed += fmt(" [seed %d: %.1f/%.1f/%.1f]", s, 100 * fb, 100 * fm, 100 * fs_);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(1, smp - b > kMinSamplingGain && m > b,
         fmt("mean FROC baseline %.2f, MAP %.2f, sampling %.2f; sampling gain %+.2f points (need > %.0f), "
             "MAP gain %+.2f; sampling >= MAP: %s (reported only); %.0f s;",
             100 * b, 100 * m, 100 * smp, 100 * (smp - b), 100 * kMinSamplingGain, 100 * (m - b),
             smp >= m ? "yes" : "no", secs) +
             per_seed);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DEEPEM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 2
void degenerate_reduction() {
  GeneratorConfig g;
  g.dims = Index3(24, 24, 24);
  const auto full = make_split(900000, 8, g);
  const auto val = make_split(905000, 4, g);
  EmConfig cfg;
  cfg.init_epochs = 2;
  cfg.em_epochs = 4;
  bool ok = true;
  const fs::path dir = fs::temp_directory_path() / "deepem_acceptance_c2";
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const TrainingResult base = train_em(full, {}, val, cfg, seed);
    const TrainingResult map = train_em(full, std::vector<LabeledScan>{}, val, cfg, seed);
    save_checkpoint({base.params, cfg, base.epochs}, dir / "a.json");
    save_checkpoint({map.params, cfg, map.epochs}, dir / "b.json");
    ok = ok && slurp(dir / "a.json") == slurp(dir / "b.json");
  }

  // through the command-line tool, as a user would run it
  std::ofstream(dir / "exp.json") << R"({"generator": {"dims": [24, 24, 24]},
    "splits": {"full": 6, "weak": 4, "validation": 3}, "data_seed": 3,
    "em": {"init_epochs": 2, "em_epochs": 3}})";
  const std::string cfg_arg = " --config " + (dir / "exp.json").string() + " --data " + (dir / "data").string();
  bool cli_ok = run_cli("generate --config " + (dir / "exp.json").string() + " --out " + (dir / "data").string()) == 0;
  save_dataset({}, dir / "data" / "train_weak.wem");
  for (const char* mode : {"baseline", "deepem-map"})
    cli_ok = cli_ok && run_cli("train" + cfg_arg + " --mode " + mode + " --seed 11 --out " + (dir / "out").string()) == 0;
  const std::string a = slurp(dir / "out" / "baseline" / "seed_11" / "checkpoint.json");
  cli_ok = cli_ok && !a.empty() && a == slurp(dir / "out" / "deepem-map" / "seed_11" / "checkpoint.json");
  fs::remove_all(dir);
  report(2, ok && cli_ok,
         fmt("empty weak set: baseline vs deepem-map checkpoints bit-identical (library, 3 seeds: %s; CLI: %s)",
             ok ? "yes" : "no", cli_ok ? "yes" : "no"));
}

// 3
void gradients() {
  Rng rng(303);
  GeneratorConfig g;
  g.dims = Index3(24, 24, 24);
  std::vector<AnchorSet> anchor_sets;
  for (std::uint64_t s = 0; s < 5; ++s)
    anchor_sets.push_back(build_anchors(generate_scan(910000 + s, g).volume, std::vector<double>{4.0, 7.0}, 3));
  double det_max = 0.0;
  for (int trial = 0; trial < kGradInstances; ++trial) {
    const AnchorSet& anchors = anchor_sets[std::size_t(trial) % anchor_sets.size()];
    DetectorParams params = DetectorParams::zeros({4.0, 7.0});
    for (Eigen::Index i = 0; i < params.weights.size(); ++i)
      params.weights[i] = std::normal_distribution<double>(0.0, 1.0)(rng);
    std::uniform_int_distribution<int> pick(0, anchors.size() - 1), count(0, 6);
    std::vector<int> pos, neg;
    for (int k = count(rng) + 1; k > 0; --k) pos.push_back(pick(rng));
    for (int k = count(rng); k > 0; --k) neg.push_back(pick(rng));
    const auto pe = gather_examples(anchors, pos), ne = gather_examples(anchors, neg);
    const LossGradient lg = supervised_loss(pe, ne, params);
    for (Eigen::Index i = 0; i < params.weights.size(); ++i) {
      const double numeric = oracle::central_difference(
          [&](double h) {
            DetectorParams p = params;
            p.weights[i] += h;
            return supervised_loss(pe, ne, p).loss;
          },
          kFdStep);
      det_max = std::max(det_max, oracle::relative_error(lg.gradient[i], numeric));
    }
  }

  const Volume vol(Index3(32, 32, 32), Region{Index3(2, 2, 2), Index3(30, 30, 30)});
  double lobe_max = 0.0;
  for (int trial = 0; trial < kGradInstances; ++trial) {
    LobeParams lp;
    for (int i = 0; i < lp.theta.size(); ++i) lp.theta.data()[i] = std::normal_distribution<double>(0.0, 1.0)(rng);
    std::vector<LobeExample> batch;
    for (int k = std::uniform_int_distribution<int>(1, 8)(rng); k > 0; --k) {
      Vec3 c;
      for (int a = 0; a < 3; ++a) c[a] = std::uniform_real_distribution<double>(2.0, 30.0)(rng);
      batch.push_back(make_lobe_example(std::uniform_int_distribution<int>(1, 6)(rng), {c, 4.0}, vol));
    }
    LobeMatrix grad;
    lobe_nll(batch, lp, &grad);
    for (int i = 0; i < lp.theta.size(); ++i) {
      const double numeric = oracle::central_difference(
          [&](double h) {
            LobeParams p = lp;
            p.theta.data()[i] += h;
            return lobe_nll(batch, p);
          },
          kFdStep);
      lobe_max = std::max(lobe_max, oracle::relative_error(grad.data()[i], numeric));
    }
  }
  report(3, det_max < kGradTol && lobe_max < kGradTol,
         fmt("%d detector + %d lobe instances, max relative error detector %.2e, lobe %.2e (tol %.0e)", kGradInstances,
             kGradInstances, det_max, lobe_max, kGradTol));
}

// 4
void posterior_suite() {
  Rng rng(404);
  const Volume vol(Index3(32, 32, 32), Region{Index3(2, 2, 2), Index3(30, 30, 30)});
  double worst_oracle = 0.0, worst_sum = 0.0, worst_tv = 0.0;
  bool map_ok = true;
  int tv_checks = 0;
  for (int trial = 0; trial < kPosteriorInstances; ++trial) {
    ModelParams p;
    p.detector = DetectorParams::zeros({4.0, 7.0});
    for (int i = 0; i < p.lobe.theta.size(); ++i) p.lobe.theta.data()[i] = std::normal_distribution<double>(0.0, 1.5)(rng);
    p.slice = {std::uniform_real_distribution<double>(0.5, 4.0)(rng), kDefaultTruncation};
    const auto props = random_proposals(rng, std::uniform_int_distribution<int>(1, 40)(rng), 2.0, 29.0);
    const WeakLabel w{std::uniform_int_distribution<int>(1, 6)(rng), std::uniform_int_distribution<int>(0, 31)(rng)};
    const auto post = posterior(props, w, vol, p);
    const auto expected = oracle::posterior_weights(props, w, vol, p);
    double sum = 0.0;
    std::size_t argmax = 0;
    for (std::size_t i = 0; i < props.size(); ++i) {
      worst_oracle = std::max(worst_oracle, std::abs(post->weights[i] - expected[i]));
      sum += post->weights[i];
      if (post->weights[i] > post->weights[argmax]) argmax = i;
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    map_ok = map_ok && infer_map(*post).anchor_id == props[argmax].anchor_id;

    if (trial % 100 == 0) {
      std::map<int, int> counts;
      for (const Proposal& q : infer_sampling(*post, kSamplingDraws, rng)) ++counts[q.anchor_id];
      double tv = 0.0;
      for (std::size_t i = 0; i < props.size(); ++i)
        tv += std::abs(double(counts[props[i].anchor_id]) / kSamplingDraws - post->weights[i]);
      worst_tv = std::max(worst_tv, tv / 2.0);
      ++tv_checks;
    }
  }
  report(4, worst_sum < kPosteriorTol && worst_oracle < kPosteriorTol && map_ok && worst_tv < kTvTol,
         fmt("%d instances: max |sum-1| %.1e, max oracle diff %.1e (tol %.0e); MAP = argmax: %s; "
             "worst TV %.4f over %d posteriors at %d draws (tol %.2f)",
             kPosteriorInstances, worst_sum, worst_oracle, kPosteriorTol, map_ok ? "yes" : "no", worst_tv, tv_checks,
             kSamplingDraws, kTvTol));
}

// 5
void nms_suite() {
  const NoduleBox unit{Vec3(0, 0, 0), 1.0};
  const bool hand = iou_3d(unit, unit) == 1.0 && iou_3d(unit, {Vec3(3, 0, 0), 1.0}) == 0.0 &&
                    iou_3d(unit, {Vec3(0.5, 0, 0), 1.0}) == 1.0 / 3.0;
  Rng rng(505);
  const EmConfig cfg;
  int agree = 0;
  bool no_overlap = true;
  for (int trial = 0; trial < kNmsSets; ++trial) {
    const double extent = std::uniform_real_distribution<double>(6.0, 30.0)(rng);
    const auto props = random_proposals(rng, std::uniform_int_distribution<int>(0, kNmsMaxProposals)(rng), 0.0, extent);
    const auto kept = filter_proposals(props, cfg);
    const auto want = oracle::nms(props, cfg.logit_threshold, cfg.nms_iou);
    bool same = kept.size() == want.size();
    for (std::size_t i = 0; same && i < kept.size(); ++i) same = kept[i].anchor_id == want[i].anchor_id;
    agree += same;
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j) no_overlap = no_overlap && iou_3d(kept[i].box, kept[j].box) <= cfg.nms_iou;
  }
  report(5, hand && agree == kNmsSets && no_overlap,
         fmt("IoU hand cases exact: %s; NMS equals oracle on %d/%d sets of <= %d proposals; pairwise IoU <= %.1f: %s",
             hand ? "yes" : "no", agree, kNmsSets, kNmsMaxProposals, cfg.nms_iou, no_overlap ? "yes" : "no"));
}

// 6
void half_gaussian_suite() {
  Rng rng(606);
  double worst = 0.0;
  for (double sigma : {1.0, 2.0, 3.0}) {
    // pairs drawn from the model itself: |slice - z| = mu + |N(0, sigma)|
    std::normal_distribution<double> noise(0.0, sigma);
    std::bernoulli_distribution sign(0.5);
    std::vector<SlicePair> pairs;
    for (int i = 0; i < kSigmaPairs; ++i) {
      const double off = (kDefaultTruncation + std::abs(noise(rng))) * (sign(rng) ? 1.0 : -1.0);
      pairs.push_back({50, {Vec3(10, 10, 50.0 - off), 5.0}});
    }
    worst = std::max(worst, std::abs(fit_sigma(pairs, kDefaultTruncation).sigma - sigma) / sigma);
  }

  // evenness and the plateau on the density; positivity and strict decrease on its log,
  // since the density itself underflows to 0 far out in the tail for small sigma
  bool shape = true;
  for (double sigma : {0.7, 2.0, 3.5}) {
    const double peak = half_gaussian_density(0.0, sigma, kDefaultTruncation);
    double prev = log_half_gaussian_density(0.0, sigma, kDefaultTruncation);
    for (int k = 0; k <= 3000; ++k) {
      const double dz = 0.01 * k;
      const double v = half_gaussian_density(dz, sigma, kDefaultTruncation);
      const double lv = log_half_gaussian_density(dz, sigma, kDefaultTruncation);
      shape = shape && std::isfinite(lv) && v == half_gaussian_density(-dz, sigma, kDefaultTruncation);
      if (dz <= kDefaultTruncation)
        shape = shape && v == peak;
      else if (dz - 0.01 <= kDefaultTruncation)
        shape = shape && lv <= prev;
      else
        shape = shape && lv < prev;
      prev = lv;
    }
  }
  const std::vector<SlicePair> degenerate{{10, {Vec3(5, 5, 10), 4.0}}, {20, {Vec3(5, 5, 21), 4.0}}};
  const bool floor = fit_sigma(degenerate, kDefaultTruncation).sigma == kSigmaFloor &&
                     fit_sigma(std::vector<SlicePair>{{7, {Vec3(5, 5, 7), 4.0}}}, 0.0).sigma == kSigmaFloor;
  report(6, worst < kSigmaRelTol && shape && floor,
         fmt("fitted sigma worst relative error %.4f over sigma in {1,2,3}, %d pairs each (tol %.2f); "
             "plateau/monotone/positive sweep: %s; floor on degenerate samples: %s",
             worst, kSigmaPairs, kSigmaRelTol, shape ? "yes" : "no", floor ? "yes" : "no"));
}

// 7
void froc_suite() {
  const std::vector<std::vector<NoduleBox>> truths{{{Vec3(10, 10, 10), 6.0}, {Vec3(20, 20, 20), 6.0}},
                                                   {{Vec3(15, 15, 15), 8.0}}};
  std::vector<Detection> perfect;
  for (std::size_t s = 0; s < truths.size(); ++s)
    for (const NoduleBox& t : truths[s]) perfect.push_back({int(s), t, 1.0});
  const bool perfect_ok = froc(perfect, truths).percent() == 100.0;
  const bool empty_ok = froc({}, truths).percent() == 0.0;

  const std::vector<Detection> dets{{0, {Vec3(10, 10, 11), 5.0}, 0.9},
                                    {1, {Vec3(5, 5, 5), 5.0}, 0.8},
                                    {1, {Vec3(15, 16, 15), 5.0}, 0.7},
                                    {0, {Vec3(10, 11, 10), 5.0}, 0.6},
                                    {0, {Vec3(25, 5, 5), 5.0}, 0.5}};
  const FrocResult hand = froc(dets, truths);
  const double third = 1.0 / 3.0, two_thirds = 2.0 / 3.0;
  const std::array<double, 7> expected{third, third, two_thirds, two_thirds, two_thirds, two_thirds, two_thirds};
  const bool hand_ok = hand.sensitivities == expected && std::abs(hand.average - 4.0 / 7.0) < 1e-15;

  Rng rng(707);
  int monotone = 0, oracle_ok = 0;
  for (int trial = 0; trial < kFrocPerturbations; ++trial) {
    const int scans = std::uniform_int_distribution<int>(1, 4)(rng);
    std::uniform_real_distribution<double> pos(0.0, 30.0), diam(4.0, 10.0), score(0.0, 1.0);
    std::vector<std::vector<NoduleBox>> t(static_cast<std::size_t>(scans));
    for (auto& v : t)
      for (int k = std::uniform_int_distribution<int>(0, 3)(rng); k > 0; --k)
        v.push_back({Vec3(pos(rng), pos(rng), pos(rng)), diam(rng)});
    t[0].push_back({Vec3(15, 15, 15), 6.0});
    std::vector<Detection> d;
    for (int k = std::uniform_int_distribution<int>(0, 20)(rng); k > 0; --k) {
      const int s = std::uniform_int_distribution<int>(0, scans - 1)(rng);
      Vec3 c(pos(rng), pos(rng), pos(rng));
      if (!t[std::size_t(s)].empty() && std::bernoulli_distribution(0.5)(rng)) c = t[std::size_t(s)][0].center + Vec3(0.5, 0, 0);
      d.push_back({s, {c, 5.0}, std::round(score(rng) * 10) / 10});
    }
    const FrocResult base = froc(d, t);
    auto hit = d;
    hit.push_back({0, {Vec3(15, 15, 15), 5.0}, score(rng)});
    auto miss = d;
    miss.push_back({scans - 1, {Vec3(400, 400, 400), 5.0}, score(rng)});
    const FrocResult up = froc(hit, t), down = froc(miss, t);
    bool ok = true;
    for (std::size_t k = 0; k < 7; ++k) {
      ok = ok && up.sensitivities[k] >= base.sensitivities[k] && down.sensitivities[k] <= base.sensitivities[k];
      if (k > 0) ok = ok && base.sensitivities[k] >= base.sensitivities[k - 1];
    }
    monotone += ok;
    const FrocResult want = oracle::froc(d, t);
    bool same = true;
    for (std::size_t k = 0; k < 7; ++k) same = same && std::abs(want.sensitivities[k] - base.sensitivities[k]) < 1e-12;
    oracle_ok += same;
  }
  report(7, perfect_ok && empty_ok && hand_ok && monotone == kFrocPerturbations && oracle_ok == kFrocPerturbations,
         fmt("perfect = 100: %s; empty = 0: %s; hand staircase (avg 4/7): %s; monotone %d/%d; "
             "brute-force agreement %d/%d",
             perfect_ok ? "yes" : "no", empty_ok ? "yes" : "no", hand_ok ? "yes" : "no", monotone, kFrocPerturbations,
             oracle_ok, kFrocPerturbations));
}

// 8
void q_monotonicity() {
  const GeneratorConfig g;
  EmConfig cfg;
  cfg.init_epochs = 3;
  cfg.em_epochs = 0;
  const ModelParams params = train_em(make_split(920000, 10, g), {}, {}, cfg, 8).params;
  Rng rng(808);
  int ok = 0, max_halvings = 0;
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kQSteps; ++i) {
    const LabeledScan scan = generate_scan(930000 + std::uint64_t(i), g);
    const AnchorSet anchors = build_anchors(scan.volume, cfg.anchor_scales, cfg.stride);
    cfg.inference_mode = i % 2 ? InferenceMode::Sampling : InferenceMode::Map;
    const EStep e = run_e_step(anchors, score_anchors(anchors, params.detector), scan.weak, scan.volume, params, cfg, rng);
    if (e.positives.empty() && e.negatives.empty()) continue;
    const double before = q_value(e, anchors, scan.volume, params);
    double det_lr = cfg.detector_lr, lobe_lr = cfg.lobe_lr;
    for (int h = 0; h <= kMaxHalvings; ++h) {
      const double after = q_value(e, anchors, scan.volume, weak_m_step(e, anchors, scan.volume, params, det_lr, lobe_lr));
      if (after >= before - kQTol) {
        ++ok;
        max_halvings = std::max(max_halvings, h);
        worst = std::min(worst, after - before);
        break;
      }
      det_lr /= 2;
      lobe_lr /= 2;
    }
  }
  report(8, ok == kQSteps,
         fmt("%d/%d fixed E-steps with Q(new) >= Q(old) - %.0e within %d halvings (max used %d, min gain %.3e)", ok,
             kQSteps, kQTol, kMaxHalvings, max_halvings, worst));
}

}  // namespace

int main() {
  const std::pair<const char*, void (*)()> criteria[] = {
      {"1", headline},          {"2", degenerate_reduction}, {"3", gradients},  {"4", posterior_suite},
      {"5", nms_suite},         {"6", half_gaussian_suite},  {"7", froc_suite}, {"8", q_monotonicity}};
  for (const auto& [id, fn] : criteria) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(std::atoi(id), false, std::string("exception: ") + e.what());
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
