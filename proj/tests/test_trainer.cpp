#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "presem/trainer.hpp"

using namespace presem;

TEST_SUITE("trainer") {
  TEST_CASE("stage_for splits exactly at half") {
    CHECK(stage_for(0, 2000) == Stage::kCoarse);
    CHECK(stage_for(999, 2000) == Stage::kCoarse);
    CHECK(stage_for(1000, 2000) == Stage::kFine);
    CHECK(stage_for(1999, 2000) == Stage::kFine);
    for (int total : {2, 100, 2000}) {
      int coarse = 0;
      for (int i = 0; i < total; ++i) coarse += stage_for(i, total) == Stage::kCoarse ? 1 : 0;
      CHECK(coarse == total / 2);
    }
    CHECK_THROWS_AS(stage_for(-1, 10), std::domain_error);
    CHECK_THROWS_AS(stage_for(10, 10), std::domain_error);
  }

  TEST_CASE("coarse grids are ten times the fine voxels") {
    TrainConfig cfg;
    const Aabb box{Eigen::Vector3d::Zero(), Eigen::Vector3d::Constant(4.0)};
    const GridPlan fine = grids_for_stage(box, cfg, Stage::kFine);
    const GridPlan coarse = grids_for_stage(box, cfg, Stage::kCoarse);
    const std::vector<double> expect{0.3, 0.6, 2.4, 9.6};
    REQUIRE(coarse.voxel_sizes.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(coarse.voxel_sizes[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(fine.levels[0].dims[0] >= 134);
    CHECK(coarse.collapsed);
    CHECK(!fine.collapsed);
    cfg.coarse_factor = 1.0;
    CHECK(grids_for_stage(box, cfg, Stage::kCoarse).voxel_sizes == grids_for_stage(box, cfg, Stage::kFine).voxel_sizes);
  }

  TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.total_iters = 3;
    CHECK_THROWS_AS(cfg.validate(), std::domain_error);
    cfg = TrainConfig{};
    cfg.lr_pr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::domain_error);
    cfg = TrainConfig{};
    cfg.coarse_factor = 0.5;
    CHECK_THROWS_AS(cfg.validate(), std::domain_error);
  }

  TEST_CASE("config text round trip") {
    TrainConfig cfg;
    cfg.total_iters = 40;
    cfg.sampler.lambda = 0.25;
    cfg.field.sdf_hidden = {32, 16};
    cfg.precision = Precision::kFloat32;
    cfg.no_sg_mlp = true;
    const std::string text = format_train_config(cfg);
    const TrainConfig back = parse_train_config(text);
    CHECK(format_train_config(back) == text);
    CHECK(back.total_iters == 40);
    CHECK(back.field.sdf_hidden == std::vector<int>{32, 16});
    CHECK(back.precision == Precision::kFloat32);
    const TrainConfig lr = parse_train_config("# comment\nlr = 0.01\n");
    CHECK(lr.lr_field == 0.01);
    CHECK(lr.lr_semantic == 0.01);
    CHECK_THROWS_AS(parse_train_config("bogus = 1"), DataError);
    CHECK_THROWS_AS(parse_train_config("total_iters = ten"), DataError);
  }

  TEST_CASE("adam first step") {
    double p = 0.0, g = 0.2, m = 0.0, v = 0.0;
    adam_update(&p, &g, &m, &v, 1, 1e-3, 1);
    CHECK(p == doctest::Approx(-1e-3 * 0.2 / (0.2 + 1e-8)).epsilon(1e-12));
    CHECK(p == doctest::Approx(-0.000999999).epsilon(1e-6));
    double q[2] = {1.0, 1.0}, gq[2] = {0.5, 0.5}, mq[2] = {0, 0}, vq[2] = {0, 0};
    adam_update(q, gq, mq, vq, 2, 1e-3, 1);
    CHECK(q[0] == q[1]);
    double z = 3.0, gz = 0.0, mz = 0.0, vz = 0.0;
    adam_update(&z, &gz, &mz, &vz, 1, 1e-3, 1);
    CHECK(z == 3.0);
  }

  TEST_CASE("adam_step names the offending block") {
    FieldConfig fc;
    fc.voxel_sizes = {0.5};
    const Aabb box{Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()};
    Field<double> f(fc, box);
    Field<double> g = f.zeros_like();
    AdamState<double> st{f.zeros_like(), f.zeros_like(), 0};
    g.decoders.pr.layers()[0].weight(0, 0) = std::nan("");
    try {
      adam_step(f, g, st, {1e-3, 1e-3, 1e-3});
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("pr_mlp.w0") != std::string::npos);
    }
    CHECK(st.t == 0);
  }

  TEST_CASE("gradient check passes for every term") {
    const GradcheckReport rep = gradient_check();
    for (const auto& e : rep.entries) {
      INFO(e.term << " rel err " << e.max_rel_error << " over " << e.checked);
      CHECK(e.checked > 0);
      CHECK(e.max_rel_error <= e.tolerance);
    }
    CHECK(rep.passed);
  }

  TEST_CASE("evaluation does not depend on the thread count") {
    GradcheckOptions o;
    o.rays = 20;
    // reuse the gradient check fixture through a fresh plan
    FieldConfig fc;
    fc.voxel_sizes = {0.2, 0.5};
    fc.sdf_hidden = {16, 16};
    fc.rgb_hidden = {16};
    fc.pr_hidden = {16};
    fc.semantic_hidden = {16};
    const Aabb box{Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()};
    Field<double> f(fc, box);
    std::mt19937_64 rng(3);
    f.initialize(rng, SpherePrior{Eigen::Vector3d::Constant(0.5), 0.3, false});
    BatchPlan plan;
    plan.stage = Stage::kFine;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int r = 0; r < 37; ++r) {
      PlannedRay pr;
      Ray ray;
      ray.origin = Eigen::Vector3d(0.1, 0.5, 0.5) + 0.05 * Eigen::Vector3d(u(rng), u(rng), u(rng));
      ray.direction = Eigen::Vector3d(1.0, u(rng) - 0.5, u(rng) - 0.5).normalized();
      ray.far = 5;
      pr.ray = *clip_to_box(ray, box, 0.02);
      for (int k = 0; k < 16; ++k) pr.samples.push_back(pr.ray.near + (pr.ray.far - pr.ray.near) * (k + 0.5) / 16);
      pr.pr_samples = pr.samples;
      pr.depth = 0.3;
      pr.color = Eigen::Vector3f(0.2f, 0.4f, 0.6f);
      pr.eikonal = {0, 1};
      plan.rays.push_back(pr);
    }
    EvaluationOptions eo;
    eo.coefficients = loss_coefficients(LossWeights{}, Stage::kFine);
    const auto a = evaluate_plan(f, plan, eo, 1);
    const auto b = evaluate_plan(f, plan, eo, 4);
    CHECK(a.total == b.total);
    auto ga = const_cast<Field<double>&>(a.gradient).blocks();
    auto gb = const_cast<Field<double>&>(b.gradient).blocks();
    bool identical = true;
    for (std::size_t i = 0; i < ga.size(); ++i)
      for (Eigen::Index j = 0; j < ga[i].size; ++j) identical = identical && ga[i].data[j] == gb[i].data[j];
    CHECK(identical);
  }

  TEST_CASE("history csv has one row per iteration") {
    std::vector<LossRecord> h(3);
    for (int i = 0; i < 3; ++i) h[static_cast<std::size_t>(i)].iteration = i;
    const auto path = (std::filesystem::temp_directory_path() / "presem_history.csv").string();
    write_history_csv(h, path);
    std::ifstream f(path);
    std::string line;
    int lines = 0;
    std::getline(f, line);
    CHECK(line == "iteration,stage,pr,rgb,depth,sdf,fs,eik,smooth,sem_rgb,sem_depth,total");
    while (std::getline(f, line)) ++lines;
    CHECK(lines == 3);
    const std::string j = history_json_line(h[0]);
    CHECK(j.find("\"sem_depth\"") != std::string::npos);
  }
}
