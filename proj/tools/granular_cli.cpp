// Command-line front end for the granular shaping pipeline. Each stage
// consumes the serialized artifacts of the previous ones inside --out.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric/divergence failure.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "granular/pipeline.hpp"

namespace pipeline = granular::pipeline;

namespace {

struct StageArgs {
  std::string config;
  std::string out;
};

void add_stage(CLI::App& app, const std::string& name, const std::string& desc,
               StageArgs& args, int& selected, int id) {
  CLI::App* sub = app.add_subcommand(name, desc);
  sub->add_option("--config", args.config, "experiment config JSON")->required();
  sub->add_option("--out", args.out, "run directory")->required();
  sub->callback([&selected, id]() { selected = id; });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"granular material shaping: data generation, reduction, learned "
               "dynamics, trajectory optimization, validation"};
  app.require_subcommand(1);

  StageArgs args;
  int selected = -1;
  add_stage(app, "gen-data", "simulate the shaken-box dataset", args, selected, 0);
  add_stage(app, "fit-pca", "fit the subspace basis from the dataset", args, selected, 1);
  add_stage(app, "train", "train the reduced-dynamics graph network", args, selected, 2);
  add_stage(app, "optimize", "run DDP toward the target shape", args, selected, 3);
  add_stage(app, "validate", "replay the optimized controls on the simulator", args,
            selected, 4);
  add_stage(app, "report", "emit metrics.json and plot-data CSVs", args, selected, 5);
  CLI::App* validate_cmd = app.get_subcommand("validate");
  bool with_feedback = false;
  validate_cmd->add_flag("--feedback", with_feedback,
                         "apply the DDP feedback gains during the replay");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = pipeline::load_config(args.config);
    const pipeline::fs::path out(args.out);
    switch (selected) {
      case 0:
        pipeline::gen_data(cfg, out);
        std::printf("dataset written to %s\n", (out / "dataset").string().c_str());
        break;
      case 1: {
        const auto basis = pipeline::fit_pca_stage(cfg, out);
        const auto curve = granular::pca::energy_curve(basis);
        std::printf("basis: %d modes, cumulative energy %.4f\n", basis.n_reduced,
                    curve.cumulative[basis.n_reduced - 1]);
        break;
      }
      case 2: {
        const auto report = pipeline::train_stage(cfg, out);
        std::printf("holdout mse %.6g, constant-predictor baseline %.6g, ratio %.3f\n",
                    report.holdout_mse, report.baseline_mse, report.ratio);
        break;
      }
      case 3: {
        const auto report = pipeline::optimize_stage(cfg, out);
        std::printf("cost %.6g -> %.6g (baseline %.6g), %d accepted iterations, %s\n",
                    report.solution.cost_history.front(), report.solution.final_cost,
                    report.baseline_cost, report.solution.iterations,
                    report.solution.converged ? "converged" : "not converged");
        break;
      }
      case 4: {
        const auto report = pipeline::validate_stage(cfg, out, with_feedback);
        if (!report.valid) {
          std::fprintf(stderr, "validation replay diverged\n");
          return 3;
        }
        std::printf("rmse fullspace %.6g (baseline %.6g), reconstructed %.6g "
                    "(baseline %.6g, improvement %.1f%%)\n",
                    report.rmse_fullspace, report.rmse_fullspace_baseline,
                    report.rmse_reconstructed, report.rmse_reconstructed_baseline,
                    100.0 * report.improvement_reconstructed);
        break;
      }
      case 5:
        pipeline::report_stage(out);
        std::printf("report written to %s\n", out.string().c_str());
        break;
      default:
        return 2;
    }
  } catch (const granular::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const granular::ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 2;
  } catch (const granular::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
