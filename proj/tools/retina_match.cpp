// Command-line front end: preprocess, synth, train, detect, register,
// evaluate, plot and serve.

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <pthread.h>
#include <thread>

#include "retina/commands.hpp"
#include "retina/serve.hpp"

namespace {

using namespace retina;
namespace fs = std::filesystem;

void add_common(CLI::App* app, cmd::Common& c, std::string& config) {
  app->add_option("--config", config, "flat key = value config file");
  app->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  app->add_option("--seed", c.seed, "seed for every stochastic step");
}

void write_output(const std::optional<fs::path>& out, const std::string& text) {
  if (out) data::write_text_atomic(*out, text);
  else std::cout << text;
}

int run_server(const fs::path& dir, const std::string& host, int port, const std::optional<fs::path>& checkpoint,
          const cmd::Common& c) {
  // Block termination signals in every thread; a dedicated waiter stops the server.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  std::optional<Checkpoint> ck;
  std::optional<Detector> det;
  const GlobalConfig g = c.resolve();
  if (checkpoint) {
    ck = load_checkpoint(*checkpoint);
    det = model_detector(ck->spec, ck->params, keypoint_config(g));
  }
  serve::AnnotationServer server(dir, det, register_config(g));
  const int bound = server.bind(host, port);
  std::cerr << "serving " << dir.string() << " on http://" << host << ":" << bound << "\n";
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.run();
  // run() also returns if the listener fails; wake the waiter in that case.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retinal keypoint detection, matching and registration"};
  app.require_subcommand(1);
  cmd::Common common;
  std::string config;

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "green channel, z-score, CLAHE and gamma for a directory");
  fs::path pre_in, pre_out;
  pre->add_option("in_dir", pre_in)->required();
  pre->add_option("out_dir", pre_out)->required();
  add_common(pre, common, config);

  // synth
  auto* syn = app.add_subcommand("synth", "generate a synthetic fundus dataset with pairs");
  fs::path syn_out;
  syn->add_option("out_dir", syn_out)->required();
  add_common(syn, common, config);

  // train
  auto* tr = app.add_subcommand("train", "train a teacher, or a student with or without distillation");
  std::string tr_kind;
  cmd::TrainOptions tro;
  std::string tr_teacher, tr_log;
  tr->add_option("kind", tr_kind, "teacher or student")->required()->check(CLI::IsMember({"teacher", "student"}));
  tr->add_option("--manifest", tro.manifest, "training manifest {train: [...], val: [...]}")->required();
  tr->add_option("--out", tro.out, "output checkpoint manifest")->required();
  tr->add_option("--teacher", tr_teacher, "teacher checkpoint for distillation");
  tr->add_flag("--scratch", tro.scratch, "train the student without a teacher");
  tr->add_option("--log", tr_log, "JSON-lines training log");
  add_common(tr, common, config);

  // detect
  auto* det = app.add_subcommand("detect", "dump keypoints and descriptors of one image");
  fs::path det_ckpt, det_img;
  std::optional<fs::path> det_out;
  det->add_option("--checkpoint", det_ckpt)->required();
  det->add_option("--image", det_img)->required();
  det->add_option("--out", det_out);
  add_common(det, common, config);

  // register
  auto* reg = app.add_subcommand("register", "register one query/reference pair");
  cmd::RegisterOptions ro;
  std::string reg_controls, reg_category;
  std::optional<fs::path> reg_out;
  reg->add_option("--checkpoint", ro.checkpoint)->required();
  reg->add_option("--query", ro.query)->required();
  reg->add_option("--ref", ro.reference)->required();
  reg->add_option("--controls", reg_controls, "control points, one 'xq yq xr yr' per line");
  reg->add_option("--category", reg_category)->check(CLI::IsMember({"S", "A", "P"}));
  reg->add_option("--id", ro.id);
  reg->add_option("--out", reg_out);
  add_common(reg, common, config);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a pair manifest");
  fs::path ev_ckpt, ev_manifest;
  std::optional<fs::path> ev_out, ev_table;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--out", ev_out, "JSON report");
  ev->add_option("--table", ev_table, "text table (stdout when omitted)");
  add_common(ev, common, config);

  // plot
  auto* pl = app.add_subcommand("plot", "SVG + CSV plots");
  pl->require_subcommand(1);
  auto* pl_dist = pl->add_subcommand("dist", "keypoints-per-image histogram");
  std::vector<fs::path> dist_inputs;
  fs::path dist_out;
  int dist_bin = 5;
  pl_dist->add_option("inputs", dist_inputs, "annotation files or a training manifest")->required();
  pl_dist->add_option("--out", dist_out, "output path stem")->required();
  pl_dist->add_option("--bin-width", dist_bin)->check(CLI::PositiveNumber);
  auto* pl_m = pl->add_subcommand("matches", "side-by-side match lines");
  fs::path pm_json, pm_q, pm_r, pm_out;
  pl_m->add_option("--matches", pm_json, "output of the register command")->required();
  pl_m->add_option("--query", pm_q)->required();
  pl_m->add_option("--ref", pm_r)->required();
  pl_m->add_option("--out", pm_out, "output path stem")->required();

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP API for the annotation UI");
  std::string sv_dir, sv_host = "127.0.0.1", sv_ckpt;
  int sv_port = 8080;
  sv->add_option("--data-dir", sv_dir, "defaults to $RETINA_MATCH_DATA_DIR");
  sv->add_option("--host", sv_host);
  sv->add_option("--port", sv_port);
  sv->add_option("--checkpoint", sv_ckpt, "model used to compute matches on demand");
  add_common(sv, common, config);

  CLI11_PARSE(app, argc, argv);
  if (!config.empty()) common.config_path = config;

  try {
    if (*pre) {
      const auto r = cmd::preprocess_dir(pre_in, pre_out, common);
      std::cerr << "preprocessed " << r.written << " images\n";
    } else if (*syn) {
      const auto ds = cmd::synth(syn_out, common);
      std::cerr << "wrote " << ds.images.size() << " images and " << ds.pairs.size() << " pairs\n";
    } else if (*tr) {
      tro.kind = nn::parse_model_kind(tr_kind);
      if (!tr_teacher.empty()) tro.teacher = tr_teacher;
      if (!tr_log.empty()) tro.log = tr_log;
      const auto res = cmd::train(tro, common);
      std::cerr << "trained " << res.log.split("train").size() << " steps\n";
    } else if (*det) {
      write_output(det_out, cmd::detect(det_ckpt, det_img, common).dump(2) + "\n");
    } else if (*reg) {
      if (!reg_controls.empty()) ro.controls = reg_controls;
      if (!reg_category.empty()) ro.category = reg_category[0];
      write_output(reg_out, cmd::register_one(ro, common).dump(2) + "\n");
    } else if (*ev) {
      const EvalReport r = cmd::evaluate(ev_ckpt, ev_manifest, common);
      if (ev_out) data::write_text_atomic(*ev_out, to_json(r).dump(2) + "\n");
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      for (const auto& e : r.errors) std::cerr << "warning: " << e << "\n";
      write_output(ev_table, format_table(r));
    } else if (*pl) {
      if (*pl_dist) {
        const auto s = cmd::plot_distribution(dist_inputs, dist_out, dist_bin);
        std::cerr << s.images << " images, mean " << s.mean << " +- " << s.stddev << "\n";
      } else {
        cmd::plot_matches(pm_json, pm_q, pm_r, pm_out);
      }
    } else if (*sv) {
      if (sv_dir.empty()) {
        const char* env = std::getenv("RETINA_MATCH_DATA_DIR");
        if (!env) fail(ErrorKind::InvalidArgument, "no --data-dir and RETINA_MATCH_DATA_DIR is unset");
        sv_dir = env;
      }
      std::optional<fs::path> ck;
      if (!sv_ckpt.empty()) ck = sv_ckpt;
      return run_server(sv_dir, sv_host, sv_port, ck, common);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
