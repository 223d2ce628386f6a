// scm: data generation, training, reconstruction, transfer, editing,
// evaluation and gradient checks.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "scm/scm.hpp"

namespace fs = std::filesystem;
using namespace scm;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void require_parent(const fs::path& p) {
  const fs::path parent = p.parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw UsageError("output directory does not exist: " + parent.string());
}

const synth::FigureSample& sample_at(const std::vector<synth::FigureSample>& data, std::int64_t i, const char* what) {
  if (i < 0 || i >= static_cast<std::int64_t>(data.size()))
    throw UsageError(std::string(what) + " index " + std::to_string(i) + " outside dataset of " +
                     std::to_string(data.size()));
  return data[static_cast<std::size_t>(i)];
}

int region_or_throw(const std::string& name) {
  if (auto r = synth::region_from_name(name)) return *r;
  std::string names;
  for (auto n : synth::kRegionNames) names += (names.empty() ? "" : ", ") + std::string(n);
  throw UsageError("unknown region '" + name + "'; valid regions: " + names);
}

struct GenData {
  fs::path out, export_dir;
  std::int64_t count = 512;
  std::uint64_t seed = 1;
  double half_fraction = 0.3;
  std::int64_t export_count = 0;
};

struct Train {
  fs::path data, config, out, resume, log;
  std::int64_t steps = -1;
  bool no_ccf = false, no_bsr = false, no_dse = false;
};

struct Common {
  fs::path ckpt, data, out;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised correlation mining network (desk scale)"};
  app.require_subcommand(1);

  GenData gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic figure dataset");
  gen->add_option("--out", gd.out, "Dataset file")->required();
  gen->add_option("--count", gd.count, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gd.seed, "Dataset seed");
  gen->add_option("--half-fraction", gd.half_fraction, "Fraction of half-body crops")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--export-dir", gd.export_dir, "Also write PNG/PGM views of the first samples here");
  gen->add_option("--export-count", gd.export_count, "Samples to export")->check(CLI::NonNegativeNumber);

  Train tr;
  auto* train_cmd = app.add_subcommand("train", "Train on a dataset file");
  train_cmd->add_option("--data", tr.data, "Dataset file")->required();
  train_cmd->add_option("--config", tr.config, "key=value config file");
  train_cmd->add_option("--out", tr.out, "Checkpoint to write")->required();
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to continue from");
  train_cmd->add_option("--steps", tr.steps, "Override the step budget")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--log", tr.log, "Metrics CSV (default: stdout)");
  train_cmd->add_flag("--no_ccf", tr.no_ccf, "Disable cross-channel fusion");
  train_cmd->add_flag("--no_bsr", tr.no_bsr, "Drop the body-structure term");
  train_cmd->add_flag("--no_dse", tr.no_dse, "Use a global style encoder");

  Common rc;
  std::vector<std::int64_t> rc_index;
  bool dump_field = false;
  auto* rec = app.add_subcommand("reconstruct", "Self-reconstruct samples");
  rec->add_option("--ckpt", rc.ckpt, "Checkpoint")->required();
  rec->add_option("--data", rc.data, "Dataset file")->required();
  rec->add_option("--index", rc_index, "Sample indices")->required();
  rec->add_option("--out-dir", rc.out, "Output directory")->required();
  rec->add_flag("--dump-field", dump_field, "Also write the correlation field as PGM");

  Common tf;
  std::int64_t tf_source = 0, tf_pose_from = -1;
  std::uint64_t tf_pose_seed = 0;
  auto* trans = app.add_subcommand("transfer", "Render a source sample under another pose");
  trans->add_option("--ckpt", tf.ckpt, "Checkpoint")->required();
  trans->add_option("--data", tf.data, "Dataset file")->required();
  trans->add_option("--source", tf_source, "Source index")->required();
  auto* pose_from = trans->add_option("--pose-from", tf_pose_from, "Take the pose of this sample");
  auto* pose_seed = trans->add_option("--pose-seed", tf_pose_seed, "Perturb the source pose with this seed");
  pose_from->excludes(pose_seed);
  trans->add_option("--out", tf.out, "Output PNG")->required();

  Common ed;
  std::int64_t ed_source = 0, ed_ref = 0;
  std::string ed_region;
  auto* edit_cmd = app.add_subcommand("edit", "Swap one region's style from a reference");
  edit_cmd->add_option("--ckpt", ed.ckpt, "Checkpoint")->required();
  edit_cmd->add_option("--data", ed.data, "Dataset file")->required();
  edit_cmd->add_option("--source", ed_source, "Source index")->required();
  edit_cmd->add_option("--ref", ed_ref, "Reference index")->required();
  edit_cmd->add_option("--region", ed_region, "Region name")->required();
  edit_cmd->add_option("--out", ed.out, "Output PNG")->required();

  Common ev;
  auto* eval_cmd = app.add_subcommand("eval", "Print l1,psnr,ssim of self-reconstruction");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset file")->required();

  GradSuiteOptions gs;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite on a reduced configuration");
  grad->add_option("--seed", gs.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) {
      require_parent(gd.out);
      auto data = synth::generate_dataset(gd.count, gd.seed, gd.half_fraction);
      synth::write_dataset(gd.out, data);
      for (std::int64_t i = 0; i < std::min<std::int64_t>(gd.export_count, gd.count); ++i)
        synth::export_sample(gd.export_dir.empty() ? gd.out.parent_path() / "samples" / std::to_string(i)
                                                   : gd.export_dir / std::to_string(i),
                             data[static_cast<std::size_t>(i)]);
      return 0;
    }

    if (*train_cmd) {
      require_file(tr.data, "dataset");
      if (!tr.config.empty()) require_file(tr.config, "config");
      if (!tr.resume.empty()) require_file(tr.resume, "checkpoint");
      require_parent(tr.out);
      if (!tr.log.empty()) require_parent(tr.log);

      std::unique_ptr<TrainState> st;
      if (!tr.resume.empty()) {
        st = load_checkpoint(tr.resume);
      } else {
        TrainConfig cfg = tr.config.empty() ? TrainConfig{} : load_config(tr.config);
        cfg.model.no_ccf = cfg.model.no_ccf || tr.no_ccf;
        cfg.model.no_dse = cfg.model.no_dse || tr.no_dse;
        cfg.no_bsr = cfg.no_bsr || tr.no_bsr;
        cfg.validate();
        st = std::make_unique<TrainState>(cfg);
      }
      if (tr.steps >= 0) st->set_total_steps(tr.steps);
      auto data = synth::read_dataset(tr.data);

      std::ofstream log_file;
      if (!tr.log.empty()) {
        log_file.open(tr.log);
        if (!log_file) throw IoError("cannot open log " + tr.log.string());
      }
      std::ostream& log = tr.log.empty() ? std::cout : log_file;
      log << StepMetrics::csv_header() << "\n";
      train(*st, data, [&](const StepMetrics& m) { log << m.csv() << "\n"; });
      log.flush();
      save_checkpoint(tr.out, *st);
      return 0;
    }

    auto load = [](const Common& c) {
      require_file(c.ckpt, "checkpoint");
      require_file(c.data, "dataset");
      return std::pair{load_checkpoint(c.ckpt), synth::read_dataset(c.data)};
    };

    if (*rec) {
      if (!fs::is_directory(rc.out)) throw UsageError("output directory does not exist: " + rc.out.string());
      auto [st, data] = load(rc);
      for (auto i : rc_index) sample_at(data, i, "sample");
      Tape::NoGrad ng;
      for (auto i : rc_index) {
        Batch b = make_batch(data, {i});
        ForwardResult r = st->net().forward(b.image, b.mask, b.pose);
        write_png(rc.out / ("recon_" + std::to_string(i) + ".png"), batch_item(r.output, 0));
        if (dump_field) {
          const std::int64_t hw = r.field.dim(1);
          write_pgm_normalized(rc.out / ("field_" + std::to_string(i) + ".pgm"), r.field.data(), hw, hw);
        }
      }
      return 0;
    }

    if (*trans) {
      if (tf_pose_from < 0 && pose_seed->count() == 0) throw UsageError("transfer needs --pose-from or --pose-seed");
      require_parent(tf.out);
      auto [st, data] = load(tf);
      const auto& source = sample_at(data, tf_source, "source");
      Tensor skeleton = pose_seed->count() ? perturbed_skeleton(source, tf_pose_seed)
                                           : sample_at(data, tf_pose_from, "pose-from").skeleton;
      write_png(tf.out, transfer(st->net(), source, skeleton));
      return 0;
    }

    if (*edit_cmd) {
      const int region = region_or_throw(ed_region);
      require_parent(ed.out);
      auto [st, data] = load(ed);
      write_png(ed.out, edit(st->net(), sample_at(data, ed_source, "source"), sample_at(data, ed_ref, "ref"), region));
      return 0;
    }

    if (*eval_cmd) {
      auto [st, data] = load(ev);
      EvalMetrics m = evaluate(st->net(), data);
      std::cout << detail::fmt_double(m.l1) << "," << detail::fmt_double(m.psnr) << "," << detail::fmt_double(m.ssim)
                << "\n";
      return 0;
    }

    if (*grad) {
      bool ok = true;
      run_gradient_suite(gs, [&](const GradSuiteEntry& e) {
        const bool pass = e.max_rel_error <= 1e-4;
        ok = ok && pass;
        std::cout << e.name << " " << e.max_rel_error << (pass ? "" : "  FAIL at " + e.worst) << "\n";
      });
      return ok ? 0 : kExitRuntime;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
