// Acceptance suite: one PASS/FAIL line per criterion, tolerances fixed here.
//
//   acceptance [--work-dir DIR] [--only N[,N...]]
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdpm/checkpoint.hpp"
#include "cdpm/cli.hpp"
#include "cdpm/config.hpp"
#include "cdpm/io.hpp"
#include "cdpm/metrics.hpp"
#include "cdpm/phantom.hpp"
#include "cdpm/png.hpp"
#include "cdpm/sampler.hpp"
#include "cdpm/training.hpp"

using namespace cdpm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

// Invokes the CLI in-process; stdout/stderr are captured and discarded
// unless the call fails.
int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cdpm");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cdpm::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << "cli failed (" << code << "): " << err.str();
  return code;
}

std::vector<fs::path> files_with_ext(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

bool same_dir_contents(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::directory_iterator(a)) fa.push_back(e.path().filename());
  for (const auto& e : fs::directory_iterator(b)) fb.push_back(e.path().filename());
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& f : fa) {
    if (f == "resolved.json") continue;  // records the output directory
    if (read_file(a / f) != read_file(b / f)) return false;
  }
  return true;
}

DenoiserParams randomized(const DenoiserConfig& c, std::uint64_t seed, double scale) {
  DenoiserParams p = init_denoiser(c, seed);
  Rng rng(seed + 1);
  for (auto& t : p.tensors())
    for (double& v : t.data) v = scale * rng.normal();
  return p;
}

// ---------------------------------------------------------------------------

Outcome schedule_correctness() {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  double log_sum = 0.0, worst_log = 0.0;
  double mean = 1.0, var = 0.0, worst_chain = 0.0;
  for (std::size_t t = 0; t < 1000; ++t) {
    log_sum += std::log1p(-s.beta(t));
    worst_log = std::max(worst_log, std::abs(s.alpha_bar(t) / std::exp(log_sum) - 1.0));
    mean *= std::sqrt(1.0 - s.beta(t));
    var = (1.0 - s.beta(t)) * var + s.beta(t);
    worst_chain = std::max({worst_chain, std::abs(mean - std::sqrt(s.alpha_bar(t))),
                            std::abs(var - (1.0 - s.alpha_bar(t)))});
  }
  return {worst_log < 1e-10 && worst_chain < 1e-12,
          "log-space rel " + fmt("%.2e", worst_log) + ", chain moments " + fmt("%.2e", worst_chain)};
}

Outcome forward_statistics() {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  // Same pinned seed as the unit test. The tolerances are about 2 standard
  // errors (mean) and 1.4 standard errors (variance) at n = 1e4, so the
  // outcome depends on the seed; it is fixed, not searched.
  Rng rng(11);
  const double x0 = 0.6;
  const std::size_t n = 10000;
  bool ok = true;
  std::string detail;
  for (std::size_t t : {250u, 500u, 999u}) {
    std::vector<double> x(n, x0), eps(n);
    for (double& e : eps) e = rng.normal();
    const auto xt = forward_sample(x, t, eps, s);
    double sum = 0.0, sq = 0.0;
    for (double v : xt) sum += v;
    const double m = sum / n;
    for (double v : xt) sq += (v - m) * (v - m);
    const double v = sq / (n - 1);
    const double sd = std::sqrt(1.0 - s.alpha_bar(t));
    // Mean error is measured in units of the marginal sd: at t = T-1 the
    // mean is ~0 and a relative bound on it would be meaningless.
    const double mean_err = std::abs(m - std::sqrt(s.alpha_bar(t)) * x0) / sd;
    const double var_err = std::abs(v / (sd * sd) - 1.0);
    ok = ok && mean_err < 0.02 && var_err < 0.02;
    detail += "t=" + std::to_string(t) + " mean " + fmt("%.4f", mean_err) + "sd var " + fmt("%.4f", var_err) + "; ";
  }
  return {ok, detail.substr(0, detail.size() - 2)};
}

Outcome gradient_fidelity() {
  TrainConfig c;
  c.schedule = {20, 1e-3, 0.3, VarianceMode::Beta};
  c.policy.tau_max = 3;
  c.policy.p_unconditional = 0.0;
  c.denoiser.base_channels = 4;
  c.denoiser.channel_mults = {1};
  c.denoiser.attn_levels = {0};
  c.denoiser.num_heads = 2;
  c.denoiser.time_embed_dim = 8;
  c.denoiser.slice_embed_dim = 8;
  c.denoiser.max_depth = 8;
  c.denoiser.max_slices = 3;
  DenoiserParams params = randomized(c.denoiser, 31, 0.3);
  PhantomSpec spec;
  spec.dims = {8, 8, 8};
  spec.seed = 5;
  Rng rng(32);
  const LossDraw d = draw_loss_example(to_slices(generate_phantom(spec)), make_schedule(c.schedule), c.policy, rng);
  const LossResult r = loss_for_draw(params, d);

  Rng pick(33);
  const double h = 1e-5;
  double worst = 0.0;
  int failures = 0, floor_hits = 0;
  for (int probe = 0; probe < 100; ++probe) {
    const auto ti = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(params.tensors().size()) - 1));
    auto& data = params.tensors()[ti].data;
    const auto k = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    const double keep = data[k];
    data[k] = keep + h;
    const double up = loss_for_draw(params, d).loss;
    data[k] = keep - h;
    const double down = loss_for_draw(params, d).loss;
    data[k] = keep;
    const double numeric = (up - down) / (2 * h);
    const double analytic = r.grads[ti][k];
    const double abs_err = std::abs(analytic - numeric);
    const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, rel);
    if (rel < 1e-4) continue;
    // Below 1e-8 the central difference is rounding noise (exactly-zero
    // gradients such as key biases under softmax).
    if (abs_err < 1e-8)
      ++floor_hits;
    else
      ++failures;
  }
  return {failures == 0, "100 probes, worst rel " + fmt("%.2e", worst) + ", " + std::to_string(floor_hits) +
                             " accepted only by the 1e-8 absolute floor, len_c=" + std::to_string(r.len_c)};
}

// Independent ancestral sampler: x_T ~ N(0, I); for t = T-1 .. 0,
// x <- (x - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z
// with z = 0 at t = 0; final clamp to [0, 1].
std::vector<double> minimal_sampler(const DenoiserParams& params, const std::vector<std::size_t>& targets,
                                    std::size_t h, std::size_t w, const NoiseSchedule& s, Rng& rng) {
  std::vector<double> x(targets.size() * h * w);
  for (double& v : x) v = rng.normal();
  for (std::size_t t = s.steps(); t-- > 0;) {
    ConditionedInput in;
    in.slices = SliceStack(targets.size(), h, w);
    in.slices.data = x;
    in.roles.assign(targets.size(), SliceRole::Target);
    in.indices = targets;
    in.t = t;
    const SliceStack eps = predict_eps(params, in);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = (x[i] - s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t)) * eps.data[i]) / std::sqrt(s.alpha(t));
    if (t > 0)
      for (double& v : x) v += std::sqrt(s.beta(t)) * rng.normal();
  }
  for (double& v : x) v = std::clamp(v, 0.0, 1.0);
  return x;
}

Outcome unconditional_equivalence() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.attn_levels = {0, 1};
  c.num_heads = 2;
  c.time_embed_dim = 16;
  c.slice_embed_dim = 16;
  c.max_depth = 16;
  c.max_slices = 10;
  const DenoiserParams params = randomized(c, 41, 0.2);
  const auto s = make_linear_schedule(50, 1e-3, 0.2);
  const std::vector<std::size_t> targets{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t mismatches = 0, total = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng a(seed), b(seed);
    const SliceStack got = generate_target(params, SliceStack(0, 8, 8), {{}, targets, 16}, s, a);
    const auto want = minimal_sampler(params, targets, 8, 8, s, b);
    total += want.size();
    for (std::size_t i = 0; i < want.size(); ++i) mismatches += got.data[i] != want[i];
  }
  return {mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(total) +
                               " values differ bit-wise (T=50, 3 seeds)"};
}

Outcome staging_arithmetic() {
  const StagingPlan p = staging_plan(128, 10, 10, 20);
  std::vector<int> hits(128, 0);
  bool ok = p.stages.size() == 13 && p.stages.front().cond.empty();
  for (const auto& st : p.stages)
    for (std::size_t i : st.target) ++hits[i];
  ok = ok && std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });
  return {ok, std::to_string(p.stages.size()) + " stages, stage 0 has " + std::to_string(p.stages.front().cond.size()) +
                  " conditions, targets partition 0..127: " +
                  (std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }) ? "yes" : "no")};
}

// Shared between criteria 6 and 9.
struct SanityModel {
  bool ready = false;
  Checkpoint checkpoint;
  std::vector<Volume> reals;
  std::string error;
};

SanityModel train_sanity(const fs::path& work, Outcome& outcome) {
  SanityModel m;
  const fs::path config = fs::path(CDPM_CONFIG_DIR) / "sanity.json";
  const fs::path data = work / "sanity_data", model = work / "sanity_model", samples = work / "sanity_samples";
  fs::remove_all(data);
  fs::remove_all(model);
  fs::remove_all(samples);
  if (cli({"phantom", "--config", config.string(), "--out", data.string()}) != 0 ||
      cli({"train", "--config", config.string(), "--data", data.string(), "--out", model.string()}) != 0 ||
      cli({"sample", "--config", config.string(), "--checkpoint", (model / "model.cdpm").string(), "--png", "--out",
           samples.string()}) != 0) {
    outcome = {false, "pipeline failed"};
    return m;
  }
  m.reals = load_volume_dir(data);
  m.checkpoint = load_checkpoint(model / "model.cdpm");
  m.ready = true;

  // Loss windows over the first and last 100 steps.
  std::ifstream csv(model / "loss.csv");
  std::string line;
  std::getline(csv, line);
  std::map<std::uint64_t, std::pair<double, int>> per_step;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string step, loss;
    std::getline(ss, step, ',');
    std::getline(ss, loss, ',');
    auto& slot = per_step[std::stoull(step)];
    slot.first += std::stod(loss);
    slot.second += 1;
  }
  const std::uint64_t last = per_step.rbegin()->first;
  double lead = 0, trail = 0;
  int nl = 0, nt = 0;
  for (const auto& [step, v] : per_step) {
    if (step <= 100) lead += v.first, nl += v.second;
    if (step > last - 100) trail += v.first, nt += v.second;
  }
  const double ratio = (trail / nt) / (lead / nl);

  Rng noise_rng(6);
  std::vector<double> noise_scores;
  for (int k = 0; k < 100; ++k) {
    Volume v(m.reals.front().dims());
    for (float& x : v.voxels()) x = static_cast<float>(noise_rng.uniform());
    noise_scores.push_back(nearest_real(v, m.reals).score);
  }
  std::sort(noise_scores.begin(), noise_scores.end());
  const double p95 = noise_scores[94];

  bool ok = ratio < 0.25;
  std::string scores;
  const auto sample_files = files_with_ext(samples, ".vol");
  ok = ok && sample_files.size() == 4;
  for (const auto& f : sample_files) {
    const Volume v = load_volume(f);
    bool in_range = true;
    for (float x : v.voxels()) in_range = in_range && std::isfinite(x) && x >= 0.0f && x <= 1.0f;
    const double s = nearest_real(v, m.reals).score;
    ok = ok && in_range && s > p95;
    scores += fmt("%.3f", s) + (in_range ? "" : "(out of range)") + " ";
  }
  outcome = {ok, "loss ratio " + fmt("%.3f", ratio) + " (< 0.25), nearest-real " + scores + "vs noise p95 " +
                     fmt("%.3f", p95)};
  return m;
}

Outcome metric_oracles() {
  Rng rng(71);
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.seed = 9;
  const Volume p = generate_phantom(spec);
  const double self = ms_ssim(p, p);

  std::vector<Volume> set;
  for (std::uint64_t i = 0; i < 6; ++i) {
    spec.seed = 100 + i;
    set.push_back(generate_phantom(spec));
  }
  MmdConfig biased;
  biased.unbiased = false;
  const double identical = mmd_volumes(set, set, biased).value;

  auto draws = [&](double mean) {
    std::vector<Volume> out;
    for (int i = 0; i < 500; ++i) out.emplace_back(Dims{1, 1, 1}, static_cast<float>(mean + rng.normal()));
    return out;
  };
  const auto a = draws(0.0), b = draws(0.0), c = draws(3.0);
  const double same = mmd_volumes(a, b).value, separated = mmd_volumes(a, c).value;

  Eigen::VectorXd m0(1), m1(1);
  Eigen::MatrixXd c0(1, 1), c1(1, 1);
  m0 << 0.0;
  m1 << 1.0;
  c0 << 1.0;
  c1 << 4.0;
  const double fd = frechet_distance(m0, c0, m1, c1);

  const bool ok = std::abs(self - 1.0) <= 1e-9 && std::abs(identical) <= 1e-12 && same < 0.01 && separated > 0.5 &&
                  std::abs(fd - 2.0) <= 1e-8;
  return {ok, "ms_ssim(x,x)-1 " + fmt("%.1e", self - 1.0) + ", biased MMD identical " + fmt("%.1e", identical) +
                  ", same " + fmt("%.4f", same) + ", separated " + fmt("%.3f", separated) + ", Frechet " +
                  fmt("%.10f", fd)};
}

Outcome determinism_and_io(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "run.json";
  write_file_atomic(config, std::string(R"({
    "seed": 21,
    "phantom": {"count": 3, "spec": {"dims": [12, 12, 12]}},
    "train": {"iterations": 8, "batch_size": 2, "learning_rate": 0.001,
              "schedule": {"steps": 10, "beta_start": 0.01, "beta_end": 0.3},
              "policy": {"tau_max": 8},
              "denoiser": {"base_channels": 4, "channel_mults": [1, 2], "attn_levels": [1], "num_heads": 1,
                           "time_embed_dim": 8, "slice_embed_dim": 8, "max_depth": 12, "max_slices": 8}},
    "sample": {"count": 2, "stage_target": 4, "stage_cond": 4}
  })"));
  bool runs_ok = true, identical = true;
  for (const char* rep : {"a", "b"}) {
    const fs::path dir = root / rep;
    runs_ok = runs_ok && cli({"phantom", "--config", config.string(), "--out", (dir / "data").string()}) == 0 &&
              cli({"train", "--config", config.string(), "--data", (dir / "data").string(), "--out",
                   (dir / "train").string()}) == 0 &&
              cli({"sample", "--config", config.string(), "--checkpoint", (dir / "train" / "model.cdpm").string(),
                   "--out", (dir / "sample").string()}) == 0 &&
              cli({"eval", "--config", config.string(), "--synth", (dir / "sample").string(), "--real",
                   (dir / "data").string(), "--out", (dir / "report.json").string()}) == 0;
  }
  if (!runs_ok) return {false, "pipeline failed"};
  for (const char* sub : {"data", "train", "sample"})
    identical = identical && same_dir_contents(root / "a" / sub, root / "b" / sub);
  identical = identical && read_file(root / "a" / "report.json") == read_file(root / "b" / "report.json");

  // VOL1 round trip over random volumes.
  Rng rng(81);
  bool vol_ok = true;
  for (int i = 0; i < 20; ++i) {
    Volume v({static_cast<std::size_t>(1 + rng.uniform_int(0, 6)), static_cast<std::size_t>(1 + rng.uniform_int(0, 6)),
              static_cast<std::size_t>(1 + rng.uniform_int(0, 6))});
    for (float& x : v.voxels()) x = static_cast<float>(rng.normal());
    const auto bytes = encode_volume(v);
    vol_ok = vol_ok && decode_volume(bytes) == v && encode_volume(decode_volume(bytes)) == bytes;
  }
  // Checkpoint round trip.
  const auto ck_bytes = read_file(root / "a" / "train" / "model.cdpm");
  const Checkpoint ck = decode_checkpoint(ck_bytes);
  const bool ck_ok = encode_checkpoint(ck.meta, ck.params) == ck_bytes;
  // Golden montage.
  const Volume ramp = decode_volume(read_file(fs::path(CDPM_TEST_DATA) / "ramp_3x4x5.vol"));
  const Montage mt = make_slice_montage(ramp, Axis::Axial, 1);
  const bool png_ok = encode_png_gray8(mt.width, mt.height, mt.pixels) ==
                      read_file(fs::path(CDPM_TEST_DATA) / "ramp_axial_montage.png");

  return {identical && vol_ok && ck_ok && png_ok,
          std::string("rerun identical: ") + (identical ? "yes" : "no") + ", VOL1 round trip: " +
              (vol_ok ? "yes" : "no") + ", checkpoint round trip: " + (ck_ok ? "yes" : "no") +
              ", golden montage: " + (png_ok ? "yes" : "no")};
}

double boundary_gap(const SliceStack& v, std::size_t a, std::size_t b) {
  double s = 0;
  auto x = v.slice(a), y = v.slice(b);
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

Outcome conditioning_effectiveness(const SanityModel& m) {
  if (!m.ready) return {false, "sanity model unavailable"};
  const DenoiserParams& params = m.checkpoint.params;
  const NoiseSchedule sched = make_schedule(m.checkpoint.meta.schedule);
  const Dims d = m.checkpoint.meta.volume_dims;
  const StagingPlan plan = staging_plan(d.depth, 10, 10, m.checkpoint.meta.policy.tau_max);
  std::set<std::size_t> bounds;
  for (std::size_t k = 1; k < plan.stages.size(); ++k) bounds.insert(plan.stages[k].target.front());

  std::vector<std::size_t> all(d.depth);
  for (std::size_t i = 0; i < d.depth; ++i) all[i] = i;
  double staged = 0, independent = 0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng r1 = Rng::substream(seed, "staged");
    const SliceStack sv = to_slices(generate_volume(params, plan, d.height, d.width, sched, r1));

    // Same blocks, each generated by its own unconditional chain.
    Rng r2 = Rng::substream(seed, "independent");
    SliceStack iv(d.depth, d.height, d.width);
    for (const auto& st : plan.stages) {
      const SliceStack block = generate_target(params, SliceStack(0, d.height, d.width), {{}, st.target, d.depth},
                                               sched, r2);
      for (std::size_t i = 0; i < st.target.size(); ++i) {
        auto src = block.slice(i);
        std::copy(src.begin(), src.end(), iv.slice(st.target[i]).begin());
      }
    }
    for (std::size_t b : bounds) {
      staged += boundary_gap(sv, b - 1, b);
      independent += boundary_gap(iv, b - 1, b);
      ++n;
    }
  }
  staged /= static_cast<double>(n);
  independent /= static_cast<double>(n);
  return {staged < independent, "mean |x_b - x_(b-1)| at stage boundaries: staged " + fmt("%.4f", staged) +
                                    " vs independent blocks " + fmt("%.4f", independent) + " (8 seeds)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "cdpm_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int k) { return selected.empty() || selected.count(k) != 0; };
  bool all_pass = true;
  SanityModel sanity;

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "schedule correctness", 1, schedule_correctness},
      {2, "forward-process statistics", 10, forward_statistics},
      {3, "gradient fidelity", 120, gradient_fidelity},
      {4, "unconditional equivalence", 60, unconditional_equivalence},
      {5, "staging arithmetic", 1, staging_arithmetic},
      {6, "overfit sanity run", 900,
       [&] {
         Outcome o;
         sanity = train_sanity(work, o);
         return o;
       }},
      {7, "metric suite oracles", 60, metric_oracles},
      {8, "determinism and I/O", 60, [&] { return determinism_and_io(work); }},
      {9, "conditioning effectiveness", 1200,
       [&] {
         if (!sanity.ready && !wanted(6)) {
           Outcome ignored;
           sanity = train_sanity(work, ignored);
         }
         return conditioning_effectiveness(sanity);
       }},
  };

  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    all_pass = all_pass && pass;
    std::printf("criterion %d %s: %s | %s | %.1fs of %.0fs budget%s\n", c.id, c.name, pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : " (over budget)");
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
