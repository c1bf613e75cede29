#include "presem/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "presem/dataio.hpp"
#include "presem/metrics.hpp"
#include "presem/trainer.hpp"

namespace presem {

namespace {

struct Options {
  int threads = 0;
  bool deterministic = false;

  std::string spec, out, data, config, ckpt, pred, gt, cull_data;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool no_semantic = false, no_sg_mlp = false, no_cull = false, quiet = false;
  int frame = 0, resolution = 0, iters = 0, samples = 200000;
  double tau = 0.05, voxel = 0.05;
};

int effective_threads(const Options& o) { return o.deterministic ? 1 : resolve_threads(o.threads); }

int cmd_make_synthetic(const Options& o, std::ostream& out) {
  const SceneSpec spec = load_scene_spec(o.spec);
  const SyntheticSummary s = generate_synthetic(spec, o.out, o.seed, effective_threads(o));
  out << "wrote " << s.dataset.frames.size() << " frames and a " << s.gt_mesh.num_faces() << "-face ground-truth mesh to "
      << o.out << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  if (!o.config.empty()) cfg = load_train_config(o.config);
  if (o.no_semantic) cfg.no_semantic = true;
  if (o.no_sg_mlp) cfg.no_sg_mlp = true;
  if (o.deterministic) cfg.deterministic = true;
  if (o.threads > 0) cfg.threads = o.threads;
  if (o.seed_set) cfg.seed = o.seed;
  if (o.iters > 0) cfg.total_iters = o.iters;
  const Dataset ds = load_dataset(o.data);
  const int every = std::max(1, cfg.log_every);
  const ProgressFn progress = [&](const LossRecord& r) {
    if (!o.quiet && (r.iteration % every == 0 || r.iteration + 1 == cfg.total_iters)) err << history_json_line(r) << "\n";
  };
  const TrainResult res = train(ds, cfg, progress, o.out + ".failed");
  save_checkpoint(res.checkpoint, o.out);
  write_history_csv(res.history, o.out + ".history.csv");
  out << "trained " << cfg.total_iters << " iterations in " << res.seconds << " s; checkpoint " << o.out << "\n";
  return kExitOk;
}

int cmd_render(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  if (o.frame < 0 || o.frame >= static_cast<int>(ck.views.size()))
    throw DataError("frame " + std::to_string(o.frame) + " out of range: checkpoint has " +
                    std::to_string(ck.views.size()) + " views");
  const RenderedFrame r = render_frame(ck, ck.intrinsics, ck.views[static_cast<std::size_t>(o.frame)].pose,
                                       effective_threads(o));
  write_png(o.out + "_color.png", r.color);
  write_png(o.out + "_semantic.png", r.semantic);
  // near is bright, far is dark, no hit is black
  const float far = std::max(1e-6f, *std::max_element(r.depth.begin(), r.depth.end()));
  Image8 vis;
  vis.width = r.width;
  vis.height = r.height;
  vis.data.resize(static_cast<std::size_t>(r.width) * r.height * 3);
  for (std::size_t p = 0; p < r.depth.size(); ++p) {
    const float d = r.depth[p];
    const auto v = d > 0.0f ? static_cast<std::uint8_t>(std::lround(40.0f + 215.0f * (1.0f - d / far))) : 0;
    vis.data[3 * p] = vis.data[3 * p + 1] = vis.data[3 * p + 2] = v;
  }
  write_png(o.out + "_depth.png", vis);
  out << "wrote " << o.out << "_{color,depth,semantic}.png\n";
  return kExitOk;
}

int cmd_extract_mesh(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Field<double>& field = ck.field;
  const Aabb box = field.grid.bounds();
  int res = o.resolution;
  if (res <= 0) {
    const double pitch = field.grid.finest_voxel();
    res = std::clamp(static_cast<int>(std::ceil(box.extent().maxCoeff() / pitch)) + 1, 8, 512);
  }
  const int threads = effective_threads(o);
  const BatchField fn = [&](const Eigen::Matrix3Xd& pts) -> Eigen::VectorXd {
    Eigen::VectorXd v(pts.cols());
    constexpr Eigen::Index kBlock = 2048;
    const int blocks = static_cast<int>((pts.cols() + kBlock - 1) / kBlock);
    parallel_for(blocks, threads, [&](int b) {
      const Eigen::Index begin = b * kBlock, n = std::min(kBlock, pts.cols() - begin);
      v.segment(begin, n) = sdf_batch(field, Eigen::Matrix3Xd(pts.middleCols(begin, n)));
    });
    return v;
  };
  MeshingOptions mo;
  mo.resolution = res;
  MeshingResult mr = extract_mesh(fn, box, mo);
  if (mr.empty) throw NumericalError("extract-mesh: the field has no zero crossing");
  TriangleMesh mesh = o.no_cull ? mr.mesh : cull_mesh(mr.mesh, ck.views);
  write_mesh(mesh, o.out);
  out << "wrote " << mesh.num_faces() << " faces (" << res << "^3 lattice" << (o.no_cull ? "" : ", culled") << ") to "
      << o.out << "\n";
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  TriangleMesh pred = read_mesh(o.pred);
  TriangleMesh gt = read_mesh(o.gt);
  if (!o.cull_data.empty()) {
    const auto views = make_culling_views(load_dataset(o.cull_data));
    pred = cull_mesh(pred, views);
    gt = cull_mesh(gt, views);
  }
  if (pred.empty()) throw DataError(o.pred + ": mesh has no faces");
  if (gt.empty()) throw DataError(o.gt + ": mesh has no faces");
  MetricsConfig mc;
  mc.samples = o.samples;
  mc.tau = o.tau;
  mc.voxel = o.voxel;
  mc.seed = o.seed;
  mc.threads = effective_threads(o);
  const MetricsReport r = evaluate(pred, gt, mc);
  std::ofstream f(o.out);
  f << metrics_json(r) << "\n";
  if (!f) throw DataError("cannot write " + o.out);
  out << metrics_table(r);
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  GradcheckOptions go;
  if (o.seed_set) go.seed = o.seed;
  const GradcheckReport rep = gradient_check(go);
  char buf[160];
  for (const auto& e : rep.entries) {
    std::snprintf(buf, sizeof buf, "%-12s max rel err %.3e (tol %.0e, %d params) %s\n", e.term.c_str(), e.max_rel_error,
                  e.tolerance, e.checked, e.passed ? "ok" : "FAIL");
    out << buf;
  }
  out << (rep.passed ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return rep.passed ? kExitOk : kExitNumerical;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic-guided neural RGB-D surface reconstruction", args.empty() ? "presem" : args[0]};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "Worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);
  app.add_flag("--deterministic", o.deterministic, "Single worker, fixed reduction order");
  const auto seed_opt = [&](CLI::App* sub, const char* help) {
    sub->add_option("--seed", o.seed, help)->each([&](const std::string&) { o.seed_set = true; });
  };
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--threads", o.threads, "Worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);
    sub->add_flag("--deterministic", o.deterministic, "Single worker, fixed reduction order");
  };

  CLI::App* synth = app.add_subcommand("make-synthetic", "Render a synthetic RGB-D dataset from a scene spec");
  synth->add_option("--spec", o.spec, "Scene spec JSON")->required();
  synth->add_option("--out", o.out, "Output dataset directory")->required();
  seed_opt(synth, "Noise seed");
  common(synth);

  CLI::App* tr = app.add_subcommand("train", "Fit the field to a dataset");
  tr->add_option("--data", o.data, "Dataset directory")->required();
  tr->add_option("--config", o.config, "Training config (key = value lines)");
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_flag("--no-semantic", o.no_semantic, "Disable semantic supervision");
  tr->add_flag("--no-sg-mlp", o.no_sg_mlp, "Disable pre-rendering guided sampling");
  tr->add_option("--iters", o.iters, "Override total_iters")->check(CLI::PositiveNumber);
  tr->add_flag("--quiet", o.quiet, "No per-iteration log on stderr");
  seed_opt(tr, "Override the config seed");
  common(tr);

  CLI::App* rd = app.add_subcommand("render", "Render color, depth and semantic images of a training view");
  rd->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  rd->add_option("--frame", o.frame, "View index")->required();
  rd->add_option("--out", o.out, "Output prefix; writes PREFIX_{color,depth,semantic}.png")->required();
  common(rd);

  CLI::App* em = app.add_subcommand("extract-mesh", "Marching cubes on the trained field");
  em->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  em->add_option("--out", o.out, "Output PLY")->required();
  em->add_option("--resolution", o.resolution, "Lattice nodes per axis (default: finest voxel pitch, at most 512)")
      ->check(CLI::Range(8, 4096));
  em->add_flag("--no-cull", o.no_cull, "Keep geometry no training view observed");
  common(em);

  CLI::App* ev = app.add_subcommand("evaluate", "Compare a predicted mesh with ground truth");
  ev->add_option("--pred", o.pred, "Predicted mesh PLY")->required();
  ev->add_option("--gt", o.gt, "Ground-truth mesh PLY")->required();
  ev->add_option("--out", o.out, "Metrics JSON")->required();
  ev->add_option("--tau", o.tau, "F-score distance threshold (m)")->check(CLI::PositiveNumber);
  ev->add_option("--voxel", o.voxel, "IoU voxel size (m)")->check(CLI::PositiveNumber);
  ev->add_option("--samples", o.samples, "Surface samples per mesh")->check(CLI::PositiveNumber);
  ev->add_option("--cull-data", o.cull_data, "Cull both meshes to what this dataset's views observe");
  seed_opt(ev, "Sampling seed");
  common(ev);

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  seed_opt(gc, "Fixture seed");

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    // help() delegates to the selected subcommand
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_make_synthetic(o, out);
    if (tr->parsed()) return cmd_train(o, out, err);
    if (rd->parsed()) return cmd_render(o, out);
    if (em->parsed()) return cmd_extract_mesh(o, out);
    if (ev->parsed()) return cmd_evaluate(o, out);
    if (gc->parsed()) return cmd_gradcheck(o, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace presem
