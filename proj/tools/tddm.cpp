#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tddm/tddm.hpp"

using namespace tddm;

namespace {

struct Common {
  std::string config;
  std::string run = "run";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "run configuration file")->required()->check(CLI::ExistingFile);
  sub->add_option("-r,--run", c.run, "run directory");
  sub->add_option("-s,--set", c.overrides, "override, key=value (repeatable)");
}

harness::RunConfig resolve(const Common& c) {
  harness::RunConfig cfg;
  cfg.parse_file(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segment-wise diffusion trajectory planner"};
  app.require_subcommand(1);

  Common gen_c, anchors_c, train_c, plan_c, eval_c, ablate_c;
  long count = -1, seed = -1;
  std::size_t scenario = 0;
  std::string axis;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic training and held-out corpora");
  add_common(gen, gen_c);
  gen->add_option("--count", count, "training scenarios (overrides data.count)");
  gen->add_option("--seed", seed, "root seed (overrides seed)");
  auto* anchors = app.add_subcommand("build-anchors", "cluster training futures into the anchor vocabulary");
  add_common(anchors, anchors_c);
  auto* train = app.add_subcommand("train", "train the denoiser");
  add_common(train, train_c);
  auto* plan = app.add_subcommand("plan", "plan one held-out scenario with a trained checkpoint");
  add_common(plan, plan_c);
  plan->add_option("--scenario", scenario, "held-out scenario index");
  auto* eval = app.add_subcommand("eval", "open- and closed-loop evaluation on the held-out split");
  add_common(eval, eval_c);
  auto* ablate = app.add_subcommand("ablate", "run an ablation axis");
  add_common(ablate, ablate_c);
  ablate->add_option("--axis", axis, "components | tokens | cfg-scale")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      harness::RunConfig cfg = resolve(gen_c);
      if (count >= 0) cfg.set("data.count", std::to_string(count));
      if (seed >= 0) cfg.set("seed", std::to_string(seed));
      harness::run_gen_data(cfg, {gen_c.run});
      std::cout << "wrote corpus to " << gen_c.run << "\n";
    } else if (*anchors) {
      harness::run_build_anchors(resolve(anchors_c), {anchors_c.run});
      std::cout << "wrote anchors to " << anchors_c.run << "\n";
    } else if (*train) {
      const auto r = harness::run_train(resolve(train_c), {train_c.run}, &std::cout);
      std::cout << "trained " << r.steps << " steps\n";
    } else if (*plan) {
      std::cout << harness::run_plan(resolve(plan_c), {plan_c.run}, scenario);
    } else if (*eval) {
      std::cout << harness::run_eval(resolve(eval_c), {eval_c.run}).to_text();
    } else if (*ablate) {
      const auto a = harness::parse_axis(axis);
      const auto r = harness::run_ablation(resolve(ablate_c), {ablate_c.run}, a, &std::cout);
      std::cout << harness::ablation_csv(r);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
