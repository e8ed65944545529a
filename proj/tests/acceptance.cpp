// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "idportrait/idportrait.hpp"
#include "mixer_oracle.hpp"
#include "test_support.hpp"

using namespace idportrait;
using idportrait::testing::bitwise_equal;
using idportrait::testing::max_abs_diff;
using idportrait::testing::random_tensor;
namespace fs = std::filesystem;
namespace orc = idportrait::oracle;

#ifndef IDPORTRAIT_CONFIG_DIR
#define IDPORTRAIT_CONFIG_DIR "configs"
#endif

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("idportrait_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const std::vector<Sample>& synthetic() {
  static const std::vector<Sample> data = [] {
    const fs::path root = scratch() / "synthetic";
    write_synthetic_dataset(root, TrainConfig{}, {8, 0, 0, {}});
    return load_dataset(root, TrainConfig{});
  }();
  return data;
}

uint64_t base_digest(Model& m) {
  uint64_t h = 0;
  auto fn = [&h](const std::string& name, Tensor& t) {
    h ^= fnv1a(name);
    const auto d = t.data();
    h = h * 1099511628211ull ^ fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)));
  };
  m.base.visit(fn, "base");
  return h;
}

void perturb_connectors(FFRNetWeights& w, uint64_t seed) {
  Rng rng(seed);
  for (auto& c : w.connectors)
    for (auto* t : {&c.weight, &c.bias})
      for (double& v : t->mutable_data()) v = 0.05 * rng.normal();
}

Outcome attention_oracle() {
  Rng rng(2024);
  double worst_fuse = 0.0, worst_dec = 0.0, worst_row = 0.0;
  int cases = 0;
  for (int64_t d = 1; d <= 4; ++d)
    for (int64_t tq = 1; tq <= 4; ++tq)
      for (int64_t tc = 0; tc <= 4 - tq; ++tc) {
        MixerConfig c;
        c.id_dim = c.clip_dim = 3;
        c.width = d;
        c.id_tokens = tq;
        c.clip_tokens = tc;
        c.query_tokens = rng.uniform_int(1, 5);
        c.layers = rng.uniform_int(1, 3);
        const auto s = static_cast<uint64_t>(rng.uniform_int(0, 1 << 30));
        const auto w = init_mixer(c, s);
        const Tensor id = random_tensor({2, tq, d}, s + 1), clip = random_tensor({2, tc, d}, s + 2);
        const auto fused = cross_attention_fuse({id}, {clip}, w);
        const auto mixed = decode_fuse(fused, w);
        for (int64_t b = 0; b < 2; ++b) {
          worst_fuse = std::max(worst_fuse, orc::max_diff(orc::tokens_of(fused.tokens, b),
                                                          orc::oracle_fuse(orc::tokens_of(id, b), orc::tokens_of(clip, b), w)));
          worst_dec = std::max(worst_dec, orc::max_diff(orc::tokens_of(mixed.tokens, b),
                                                        orc::oracle_decoder(orc::tokens_of(fused.tokens, b), w)));
        }
        const Tensor probs = nn::attention_probs(random_tensor({2, tq, d}, s + 3), concat({id, clip}, 1));
        const int64_t tk = probs.dim(-1);
        for (int64_t r = 0; r < probs.numel() / tk; ++r) {
          double sum = 0.0;
          for (int64_t j = 0; j < tk; ++j) sum += probs[r * tk + j];
          worst_row = std::max(worst_row, std::abs(sum - 1.0));
        }
        ++cases;
      }
  return {worst_fuse <= 1e-6 && worst_dec <= 1e-6 && worst_row <= 1e-6,
          fmt("%d shapes, max err fuse %.2e decode %.2e, softmax row sum %.2e", cases, worst_fuse, worst_dec, worst_row)};
}

Outcome gradient_suite() {
  TrainConfig c;
  c.batch_size = 1;
  c.lambda_id = 0.5;
  c.id_loss_every_n = 1;
  TrainState s = init_train_state(c);
  Model& m = s.model;
  perturb_connectors(m.ffrnet, 5);
  const auto data = prepare_dataset(m, {synthetic()[0]});
  const Batch b = make_batch(data, {0});
  const StepDraws d = draw_step(m, b, 0, s.rng);
  if (!d.x_T) return {false, "identity loss not active"};
  auto loss = [&] { return step_losses(m, b, d).l_total; };

  std::vector<std::pair<std::string, Tensor>> mixer, ffr;
  for (auto& [name, t] : m.trainable_parameters()) (name.rfind("mixer.", 0) == 0 ? mixer : ffr).emplace_back(name, t);
  for (auto* group : {&mixer, &ffr})
    for (auto& [name, t] : *group) t.zero_grad();
  loss().backward();

  // Central differences at h = 1e-4 resolve about 1e-12 on an O(1) loss, so
  // indices are drawn among entries whose gradient is well above that.
  constexpr double kResolvable = 1e-8;
  Rng pick(77);
  int n = 0, bad = 0, vanishing = 0;
  double worst = 0.0;
  std::string worst_name;
  for (auto* group : {&mixer, &ffr}) {
    const size_t count = 12;
    for (size_t k = 0; k < count; ++k) {
      std::vector<int64_t> candidates;
      size_t j = k * group->size() / count;
      for (; j < group->size(); ++j) {
        const Tensor& t = (*group)[j].second;
        if (t.has_grad())
          for (int64_t i = 0; i < t.numel(); ++i)
            if (std::abs(t.grad()[static_cast<size_t>(i)]) > kResolvable) candidates.push_back(i);
        if (!candidates.empty()) break;
        ++vanishing;
      }
      if (candidates.empty()) continue;
      auto& [name, t] = (*group)[j];
      const int64_t idx = candidates[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(candidates.size())))];
      const auto g = idportrait::testing::probe_gradient(t, idx, loss);
      ++n;
      if (g.rel_error() > 1e-3) ++bad;
      if (g.rel_error() >= worst) {
        worst = g.rel_error();
        worst_name = fmt("%s[%lld] analytic %.6e numeric %.6e", name.c_str(), static_cast<long long>(idx), g.analytic,
                         g.numeric);
      }
    }
  }
  return {bad == 0 && n >= 20,
          fmt("%d samples from %zu mixer and %zu control tensors, %d over rtol, %d tensors skipped with no resolvable entry; "
              "worst %.2e at %s",
              n, mixer.size(), ffr.size(), bad, vanishing, worst, worst_name.c_str())};
}

Outcome zero_init() {
  const DenoiserWeights base = init_denoiser(DenoiserConfig{}, 11);
  const FFRNetWeights f = init_from_base(base, 12);
  const auto& c = base.config;
  NoGradGuard ng;
  Rng rng(13);
  double worst = 0.0;
  for (uint64_t i = 0; i < 100; ++i) {
    const Conditioning cond{random_tensor({1, 3, c.control_size(), c.control_size()}, 1000 + i),
                            random_tensor({1, 16, c.context_dim}, 2000 + i),
                            random_tensor({1, c.context_tokens, c.context_dim}, 3000 + i), false};
    const Tensor z = random_tensor({1, c.latent_channels, c.latent_size, c.latent_size}, 4000 + i);
    const std::vector<int64_t> t{rng.uniform_int(0, 100)};
    worst = std::max(worst, max_abs_diff(predict_noise(base, &f, cond, z, t), denoise(base, z, t, cond.context)));
  }
  return {worst <= 1e-7, fmt("100 inputs, max |with branch - base| = %.3e", worst)};
}

Outcome landmark_invariants() {
  const MorphableBasis basis = make_toy_basis();
  Rng rng(31);
  int algebra = 0, shape_bits = 0, direct = 0, count = 0;
  double mesh_err = 0.0, plane_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const FaceParams a = random_face_params(rng, basis), b = random_face_params(rng, basis),
                     e = random_face_params(rng, basis);
    const FaceParams ab = mix_params(a, b);
    if (!(ab.shape == a.shape && ab.pose == b.pose && ab.expression == b.expression && mix_params(a, a) == a &&
          mix_params(ab, e) == mix_params(a, e) && mix_params(a, mix_params(b, e)) == mix_params(a, e)))
      ++algebra;
    if (std::memcmp(ab.shape.data(), a.shape.data(), a.shape.size() * sizeof(double)) != 0) ++shape_bits;

    const auto [lm, img] = predict_landmarks(a, b, basis, 64, 64);
    if (lm.points.size() != 72 || lm.visible.size() != 72 || img.height != 64) ++count;
    if (predict_landmarks(a, a, basis, 64, 64).first != extract_landmarks(a, basis)) ++direct;

    FaceParams rest = a;
    rest.pose = Pose{};
    FaceParams moved = rest;
    moved.pose.yaw = rng.uniform(-3.1, 3.1);
    moved.pose.pitch = rng.uniform(-3.1, 3.1);
    moved.pose.roll = rng.uniform(-3.1, 3.1);
    moved.pose.tx = rng.uniform(-0.5, 0.5);
    moved.pose.ty = rng.uniform(-0.5, 0.5);
    const Mesh r = synthesize_mesh(rest, basis), mv = synthesize_mesh(moved, basis);
    for (int64_t i = 0; i < r.rows(); i += 5)
      for (int64_t j = i + 1; j < r.rows(); j += 9)
        mesh_err = std::max(mesh_err, std::abs((r.row(i) - r.row(j)).norm() - (mv.row(i) - mv.row(j)).norm()));

    // In-plane rotation and translation move projected landmarks rigidly.
    FaceParams roll = rest;
    roll.pose.roll = moved.pose.roll;
    roll.pose.tx = moved.pose.tx;
    roll.pose.ty = moved.pose.ty;
    const auto l0 = extract_landmarks(rest, basis), l1 = extract_landmarks(roll, basis);
    for (size_t i = 0; i < 72; ++i)
      for (size_t j = i + 1; j < 72; ++j) {
        const double d0 = std::hypot(l0.points[i][0] - l0.points[j][0], l0.points[i][1] - l0.points[j][1]);
        const double d1 = std::hypot(l1.points[i][0] - l1.points[j][0], l1.points[i][1] - l1.points[j][1]);
        plane_err = std::max(plane_err, std::abs(d0 - d1));
      }
  }
  const bool ok = algebra == 0 && shape_bits == 0 && direct == 0 && count == 0 && mesh_err <= 1e-6 && plane_err <= 1e-6;
  return {ok, fmt("50 faces: algebra violations %d, shape bit mismatches %d, source==drive mismatches %d, "
                  "count errors %d, isometry err 3D %.2e / image plane %.2e",
                  algebra, shape_bits, direct, count, mesh_err, plane_err)};
}

Outcome loss_algebra() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  const Tensor eps = random_tensor({2, 4, 8, 8}, 1), pred = random_tensor({2, 4, 8, 8}, 2);
  double mse = 0.0;
  for (int64_t i = 0; i < eps.numel(); ++i) mse += (eps[i] - pred[i]) * (eps[i] - pred[i]);
  mse /= static_cast<double>(eps.numel());
  expect(std::abs(masked_diffusion_loss(eps, pred, Tensor::full({2, 1, 8, 8}, 1.0)).item() - mse) <= 1e-12 * mse,
         "mask=1 vs MSE");
  expect(masked_diffusion_loss(eps, pred, Tensor::zeros({2, 1, 8, 8})).item() == 0.0, "mask=0");
  const Tensor one = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 0});
  expect(masked_diffusion_loss(one, Tensor::zeros({1, 1, 2, 2}), one).item() == 0.25, "2x2 hand example");
  expect(total_loss(0.8, 0.3, 0.5).l_total == 0.8 + 0.5 * 0.3, "total_loss");
  expect(total_loss(Tensor::scalar(0.8), Tensor::scalar(0.3), 0.5).item() == 0.8 + 0.5 * 0.3, "total_loss graph");

  const TrainConfig cfg = load_config(fs::path(IDPORTRAIT_CONFIG_DIR) / "default.yaml");
  expect(cfg.lambda_id == 0.5, "lambda_id default");
  expect(cfg.guidance_scale == 2.0, "guidance default");
  const TrainConfig empty = parse_config("");
  expect(empty.lambda_id == 0.5 && empty.guidance_scale == 2.0, "built-in defaults");

  Model m = build_model(cfg);
  perturb_connectors(m.ffrnet, 3);
  const auto& dc = m.base.config;
  const Conditioning cond{random_tensor({1, 3, dc.control_size(), dc.control_size()}, 4),
                          random_tensor({1, 16, dc.context_dim}, 5), random_tensor({1, dc.context_tokens, dc.context_dim}, 6),
                          false};
  Conditioning uncond = cond;
  uncond.context = null_context_batch(m.base, 1);
  const Tensor xT = random_tensor({1, dc.latent_channels, dc.latent_size, dc.latent_size}, 7);
  NoGradGuard ng;
  const double g1 = max_abs_diff(guided_sample(m.base, &m.ffrnet, cond, xT, cfg.sample_steps, 1.0, m.schedule),
                                 lightning_generate(m.base, &m.ffrnet, cond, xT, cfg.sample_steps, m.schedule));
  const double g0 = max_abs_diff(guided_sample(m.base, &m.ffrnet, cond, xT, cfg.sample_steps, 0.0, m.schedule),
                                 lightning_generate(m.base, &m.ffrnet, uncond, xT, cfg.sample_steps, m.schedule));
  expect(g1 <= 1e-7, "g=1 identity");
  expect(g0 <= 1e-7, "g=0 identity");
  std::string failed;
  for (const auto& f : failures) failed += " " + f;
  return {failures.empty(), fmt("config lambda_id %g guidance %g; cfg identity err g=1 %.2e g=0 %.2e%s%s", cfg.lambda_id,
                                cfg.guidance_scale, g1, g0, failed.empty() ? "" : "; failed:", failed.c_str())};
}

Outcome dropout_rate() {
  const TrainConfig cfg = load_config(fs::path(IDPORTRAIT_CONFIG_DIR) / "default.yaml");
  const Tensor null = Tensor::zeros({8, 64});
  const Tensor text = Tensor::full({100, 8, 64}, 1.0);
  Rng rng(derive_seed(0, "dropout-acceptance"));
  int64_t dropped = 0, total = 0, mismatched = 0;
  for (int k = 0; k < 100; ++k) {
    const DropoutResult r = cfg_dropout(text, null, cfg.cfg_dropout_p, rng);
    for (int64_t i = 0; i < 100; ++i) {
      const bool is_null = r.context[i * 8 * 64] == 0.0;
      if (is_null != r.dropped[static_cast<size_t>(i)]) ++mismatched;
      dropped += is_null;
      ++total;
    }
  }
  const double rate = static_cast<double>(dropped) / static_cast<double>(total);
  return {rate >= 0.08 && rate <= 0.12 && mismatched == 0 && total == 10000,
          fmt("p=%g, %lld of %lld contexts replaced (rate %.4f)", cfg.cfg_dropout_p, static_cast<long long>(dropped),
              static_cast<long long>(total), rate)};
}

Outcome overfit() {
  TrainConfig c;
  c.lr = 3e-3;
  TrainState s = init_train_state(c);
  const auto data = prepare_dataset(s.model, synthetic());
  const uint64_t digest = base_digest(s.model);
  const double before = probe_diffusion_loss(s.model, data, 1);
  double first = 0.0, last = 0.0;
  int changed = 0;
  for (int i = 0; i < 200; ++i) {
    const LossBreakdown lb = train_step(s, data);
    if (i == 0) first = lb.l_diff;
    last = lb.l_diff;
    if (base_digest(s.model) != digest) ++changed;
  }
  const double after = probe_diffusion_loss(s.model, data, 1);
  return {after < 0.5 * before && changed == 0,
          fmt("fixed-noise l_diff %.5f -> %.5f (%.1f%%), batch l_diff first %.5f last %.5f, base changed on %d steps",
              before, after, 100.0 * after / before, first, last, changed)};
}

Outcome ablation_reachability() {
  AblationMatrix mtx = parse_ablation_matrix("steps: 20\nseeds: [0, 1, 2]\nbase: {train: {lr: 3.0e-3}}\n");
  const auto& data = synthetic();
  std::string rows;
  int errors = 0;
  double mixer_sim = 0.0, id_sim = 0.0;
  for (const auto& e : mtx.entries) {
    const bool averaged = e.name == "full" || e.name == "feature_id";
    for (uint64_t seed : mtx.seeds) {
      if (!averaged && seed != mtx.seeds.front()) continue;
      try {
        const TrainConfig c = ablation_config(TrainConfig{}, mtx, e, seed);
        const AblationResult r = run_ablation_entry(c, e.name, {data[seed % data.size()]}, mtx.steps);
        if (e.name == "full") mixer_sim += r.face_sim / 3.0;
        if (e.name == "feature_id") id_sim += r.face_sim / 3.0;
        if (seed == mtx.seeds.front()) rows += fmt(" %s=%.4f", e.name.c_str(), r.face_sim);
      } catch (const std::exception& ex) {
        ++errors;
        rows += fmt(" %s:error(%s)", e.name.c_str(), ex.what());
      }
    }
  }
  return {errors == 0, fmt("%zu configs ran, %d errors; face_sim seed 0:%s; mixer vs id-only over 3 seeds %.4f vs %.4f (%s)",
                           mtx.entries.size(), errors, rows.c_str(), mixer_sim, id_sim,
                           mixer_sim > id_sim ? "mixer higher" : "mixer not higher, reported only")};
}

Outcome resume_equivalence() {
  TrainConfig c;
  c.lr = 3e-3;
  c.batch_size = 2;
  const auto data = prepare_dataset(build_model(c), synthetic());
  TrainState straight = init_train_state(c);
  std::vector<double> a, b;
  for (int i = 0; i < 50; ++i) a.push_back(train_step(straight, data).l_total);

  TrainState first = init_train_state(c);
  for (int i = 0; i < 25; ++i) b.push_back(train_step(first, data).l_total);
  const fs::path p = scratch() / "resume.ckpt";
  save_checkpoint(p, first);
  TrainState resumed = load_train_state(p);
  for (int i = 25; i < 50; ++i) b.push_back(train_step(resumed, data).l_total);

  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return {worst <= 1e-7, fmt("50 steps interrupted at 25, max per-step |l_total diff| = %.3e", worst)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 for none
  std::function<Outcome()> run;
};

}  // namespace

// With arguments, runs only the listed criterion numbers.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  const std::vector<Criterion> all{
      {1, "attention oracle", 5.0, attention_oracle},
      {2, "gradient suite", 120.0, gradient_suite},
      {3, "zero-init equivalence", 30.0, zero_init},
      {4, "landmark invariants", 10.0, landmark_invariants},
      {5, "loss algebra and defaults", 0.0, loss_algebra},
      {6, "dropout frequency", 0.0, dropout_rate},
      {7, "overfit smoke test", 300.0, overfit},
      {8, "ablation reachability", 0.0, ablation_reachability},
      {9, "resume equivalence", 0.0, resume_equivalence},
  };
  int failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0.0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s: %s [%.2f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  fs::remove_all(scratch());
  std::printf("%d of %d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
