// idportrait command-line interface.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "idportrait/idportrait.hpp"

namespace fs = std::filesystem;
using namespace idportrait;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

Tensor load_image_or_latent(const fs::path& p, const TrainConfig& c) {
  if (p.extension() == ".lat") return io::load_latent(p);
  return io::image_to_latent(io::read_png(p), c.latent_channels, c.latent_size);
}

void write_image_or_latent(const fs::path& p, const Tensor& z) {
  if (p.extension() == ".lat") io::save_latent(p, z);
  else io::write_png(p, io::latent_to_image(z));
}

Box parse_box(const std::string& s) {
  Box b{};
  if (std::sscanf(s.c_str(), "%lf,%lf,%lf,%lf", &b.x0, &b.y0, &b.x1, &b.y1) != 4)
    throw UsageError("--bbox expects x0,y0,x1,y1");
  validate_box(b);
  return b;
}

int run_train(const std::string& config_path, int64_t steps_override, const std::string& resume) {
  const fs::path cfg_file(config_path);
  TrainConfig cfg = load_config(config_path);
  const fs::path dir = cfg_file.parent_path();
  const fs::path out = resolve(dir, cfg.output);
  fs::create_directories(out);

  TrainState s = resume.empty() ? init_train_state(cfg) : load_train_state(resume);
  if (!resume.empty() && config_hash(s.model.config) != config_hash(cfg))
    std::cerr << "note: resuming with the configuration stored in " << resume << "\n";
  const TrainConfig& c = s.model.config;
  const auto data = load_dataset(resolve(dir, c.dataset), c);
  if (data.empty()) throw UsageError("dataset " + resolve(dir, c.dataset).string() + " has no items");
  const auto prepared = prepare_dataset(s.model, data);
  const int64_t total = steps_override >= 0 ? steps_override : c.steps;

  std::ofstream log(out / "loss.tsv", s.step == 0 ? std::ios::trunc : std::ios::app);
  if (s.step == 0) log << "step\tl_diff\tl_id\tl_total\n";
  log.precision(17);
  while (s.step < total) {
    const int64_t step = s.step;
    const LossBreakdown lb = train_step(s, prepared);
    log << step << '\t' << lb.l_diff << '\t' << lb.l_id << '\t' << lb.l_total << '\n';
    if (c.log_every > 0 && (step % c.log_every == 0 || s.step == total))
      std::printf("step %lld  l_diff %.6f  l_id %.6f  l_total %.6f\n", static_cast<long long>(step), lb.l_diff, lb.l_id,
                  lb.l_total);
    if (c.checkpoint_every > 0 && s.step % c.checkpoint_every == 0)
      save_checkpoint(out / ("step_" + std::to_string(s.step) + ".ckpt"), s);
  }
  save_checkpoint(out / "final.ckpt", s);
  std::printf("wrote %s\n", (out / "final.ckpt").string().c_str());
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& ref, const std::string& drive_params,
              const std::string& source_params, const std::string& bbox, const std::string& prompt, uint64_t seed,
              const std::string& out) {
  TrainState s = load_train_state(ckpt);
  const Model& m = s.model;
  InferenceRequest req;
  req.reference = load_image_or_latent(ref, m.config);
  if (!bbox.empty()) req.bbox = parse_box(bbox);
  req.drive = io::load_face_params(drive_params);
  req.source = source_params.empty()
                   ? FaceParams::neutral(static_cast<size_t>(m.basis.shape_dims()), static_cast<size_t>(m.basis.expr_dims()))
                   : io::load_face_params(source_params);
  req.prompt = prompt;
  req.seed = seed;
  const InferenceResult r = infer(m, req);
  write_image_or_latent(out, r.latent);
  std::cout << format_report(r.report);
  return 0;
}

int run_predict_landmarks(const std::string& source, const std::string& drive, const std::string& out, int64_t size) {
  const MorphableBasis basis = make_toy_basis();
  const auto [lm, img] = predict_landmarks(io::load_face_params(source), io::load_face_params(drive), basis, size, size);
  io::write_png(out, io::control_to_image(img));
  fs::path sidecar(out);
  sidecar.replace_extension(".txt");
  std::ofstream(sidecar) << io::format_landmarks(lm);
  std::printf("wrote %s and %s\n", out.c_str(), sidecar.string().c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& ids, const std::string& poses, const std::string& out) {
  TrainState s = load_train_state(ckpt);
  const auto id_set = load_dataset(ids, s.model.config);
  const EvalTable t = evaluate(s.model, id_set, load_pose_templates(poses));
  const std::string tsv = format_tsv(t);
  if (out.empty()) std::cout << tsv;
  else std::ofstream(out) << tsv;
  std::fprintf(stderr, "mean face_sim %.6f  mean clip_face %.6f over %zu rows\n", t.mean_face_sim, t.mean_clip_face,
               t.rows.size());
  return 0;
}

int run_ablate(const std::string& matrix_path, const std::string& config_path, const std::string& out) {
  const AblationMatrix mtx = parse_ablation_matrix(read_text(matrix_path));
  const TrainConfig base = config_path.empty() ? TrainConfig{} : load_config(config_path);
  const fs::path dir = config_path.empty() ? fs::path(matrix_path).parent_path() : fs::path(config_path).parent_path();
  std::vector<AblationResult> rows;
  for (const auto& e : mtx.entries)
    for (uint64_t seed : mtx.seeds) {
      const TrainConfig c = ablation_config(base, mtx, e, seed);
      const auto data = load_dataset(resolve(dir, c.dataset), c);
      if (data.empty()) throw UsageError("ablation dataset is empty");
      rows.push_back(run_ablation_entry(c, e.name, data, mtx.steps));
      std::fprintf(stderr, "%s seed %llu: face_sim %.6f\n", e.name.c_str(), static_cast<unsigned long long>(seed),
                   rows.back().face_sim);
    }
  const std::string tsv = format_ablation_tsv(rows);
  if (out.empty()) std::cout << tsv;
  else std::ofstream(out) << tsv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"idportrait: identity-preserving portrait generation at toy scale"};
  app.require_subcommand(1);

  std::string config, resume, ckpt, ref, drive, source, bbox, prompt = "a portrait photo of a person", out, ids, poses,
                                                                 matrix;
  int64_t steps = -1, size = 64, count = 8, n_poses = 10;
  uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train the feature path and control branch");
  train->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--steps", steps, "override train.steps");
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  auto* inf = app.add_subcommand("infer", "generate one portrait");
  inf->add_option("--ckpt", ckpt, "checkpoint")->required();
  inf->add_option("--ref", ref, "reference image (.png) or latent (.lat)")->required()->check(CLI::ExistingFile);
  inf->add_option("--drive-params", drive, "driving face parameters")->required()->check(CLI::ExistingFile);
  inf->add_option("--source-params", source, "face parameters of the reference identity")->check(CLI::ExistingFile);
  inf->add_option("--bbox", bbox, "face box in the reference, x0,y0,x1,y1");
  inf->add_option("--prompt", prompt, "text prompt");
  inf->add_option("--seed", seed, "sampling seed");
  inf->add_option("--out", out, "output image (.png) or latent (.lat)")->required();

  auto* lmk = app.add_subcommand("predict-landmarks", "render the predicted landmark control image");
  lmk->add_option("--source", source, "source face parameters")->required()->check(CLI::ExistingFile);
  lmk->add_option("--drive", drive, "driving face parameters")->required()->check(CLI::ExistingFile);
  lmk->add_option("--out", out, "output PNG; landmarks go to the same path with .txt")->required();
  lmk->add_option("--size", size, "image size in pixels")->check(CLI::Range(8, 4096));

  auto* ev = app.add_subcommand("eval", "identity and detail similarity over identities x poses");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--ids", ids, "dataset directory of identities")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--poses", poses, "directory of pose template files")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out, "TSV report (stdout when omitted)");

  auto* abl = app.add_subcommand("ablate", "train and sample every configuration of an ablation matrix");
  abl->add_option("--matrix", matrix, "matrix file")->required()->check(CLI::ExistingFile);
  abl->add_option("--config", config, "base config file")->check(CLI::ExistingFile);
  abl->add_option("--out", out, "TSV report (stdout when omitted)");

  auto* syn = app.add_subcommand("make-synthetic", "write a synthetic dataset");
  syn->add_option("--out", out, "output directory")->required();
  syn->add_option("--count", count, "number of identities")->check(CLI::PositiveNumber);
  syn->add_option("--poses", n_poses, "pose templates written to <out>/poses")->check(CLI::NonNegativeNumber);
  syn->add_option("--seed", seed, "generator seed");
  syn->add_option("--config", config, "config whose latent geometry to use")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return run_train(config, steps, resume);
    if (*inf) return run_infer(ckpt, ref, drive, source, bbox, prompt, seed, out);
    if (*lmk) return run_predict_landmarks(source, drive, out, size);
    if (*ev) return run_eval(ckpt, ids, poses, out);
    if (*abl) return run_ablate(matrix, config, out);
    if (*syn) {
      const TrainConfig c = config.empty() ? TrainConfig{} : load_config(config);
      write_synthetic_dataset(out, c, {count, seed, n_poses, {}});
      std::printf("wrote %lld items to %s\n", static_cast<long long>(count), out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
