// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "wnet/service.hpp"

namespace wnet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline httplib::Server*& active_server() {
  static httplib::Server* server = nullptr;
  return server;
}

}  // namespace detail

/// Flag-level view of TrainConfig plus run options.
struct TrainOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  std::filesystem::path resume;
  std::string preset = "full";
  Index keep_checkpoints = 0;
  TrainConfig config;
};

/// Whole command line: synth-data, train, generate, eval, serve. Returns 0 on
/// success, 1 on usage errors and 2 on runtime failures.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"W-Net one-shot glyph generation"};
  app.set_config("--config", "", "Read options from a TOML/INI key-value file");
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Random seed")->capture_default_str(); };

  // synth-data
  int styles = 3, chars = 16;
  std::filesystem::path synth_out;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic glyph corpus and manifest");
  synth->add_option("--styles", styles, "Number of styles (besides the prototype style)")->capture_default_str();
  synth->add_option("--chars", chars, "Number of characters")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();
  add_seed(synth);

  // train
  TrainOptions topt;
  auto& tc = topt.config;
  auto* train = app.add_subcommand("train", "Train W-Net on a corpus");
  train->add_option("--data", topt.data, "Corpus directory (manifest.txt)")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", topt.out, "Checkpoint and metrics directory")->required();
  train->add_option("--resume", topt.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--preset", topt.preset, "Network widths: full or desk")
      ->check(CLI::IsMember({"full", "desk"}))
      ->capture_default_str();
  train->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
  train->add_option("--iterations-per-epoch", tc.iterations_per_epoch, "0 = triplets / batch")->capture_default_str();
  train->add_option("--batch", tc.batch, "Batch size")->capture_default_str();
  train->add_option("--d-steps", tc.d_steps, "Critic steps per generator step")->capture_default_str();
  train->add_option("--lr", tc.lr, "Initial learning rate")->capture_default_str();
  train->add_option("--lr-decay", tc.lr_decay, "Per-epoch learning-rate factor")->capture_default_str();
  train->add_option("--beta1", tc.adam.beta1, "Adam beta1")->capture_default_str();
  train->add_option("--beta2", tc.adam.beta2, "Adam beta2")->capture_default_str();
  train->add_option("--adam-epsilon", tc.adam.epsilon, "Adam epsilon")->capture_default_str();
  train->add_option("--weight-decay", tc.adam.weight_decay, "Decoupled weight decay")->capture_default_str();
  train->add_option("--alpha", tc.weights.alpha, "Adversarial weight")->capture_default_str();
  train->add_option("--alpha-gp", tc.weights.alpha_gp, "Gradient-penalty weight")->capture_default_str();
  train->add_option("--beta-d", tc.weights.beta_d, "Critic style-classifier weight")->capture_default_str();
  train->add_option("--beta-p", tc.weights.beta_p, "Content-head weight")->capture_default_str();
  train->add_option("--beta-r", tc.weights.beta_r, "Style-head weight")->capture_default_str();
  train->add_option("--lambda-l1", tc.weights.lambda_l1, "Pixel L1 weight")->capture_default_str();
  train->add_option("--lambda-phi", tc.weights.lambda_phi, "Perceptual weight")->capture_default_str();
  train->add_option("--psi-p", tc.weights.psi_p, "Content constant-loss weight")->capture_default_str();
  train->add_option("--psi-r", tc.weights.psi_r, "Style constant-loss weight")->capture_default_str();
  train->add_option("--blocks", tc.generator.blocks, "Residual blocks per chain (M)")->capture_default_str();
  train->add_option("--kernel", tc.generator.kernel, "Encoder/decoder kernel size")->capture_default_str();
  train->add_option("--generator-widths", tc.generator.widths, "Encoder widths L1..L6 (last must be 512)")
      ->delimiter(',');
  train->add_option("--critic-widths", tc.critic.widths, "Critic conv widths")->delimiter(',');
  train->add_option("--critic-kernel", tc.critic.kernel, "Critic kernel size")->capture_default_str();
  train->add_option("--phi-widths", tc.phi.widths, "Feature-network stage widths (5)")->delimiter(',');
  train->add_option("--dropout", tc.generator.dropout, "Decoder dropout rate")->capture_default_str();
  train->add_option("--critic-dropout", tc.critic.dropout, "Critic dropout rate")->capture_default_str();
  train->add_flag("!--gp-unsquared", tc.gp_squared, "Use |‖g‖−1| instead of (‖g‖−1)²");
  train->add_option("--keep-checkpoints", topt.keep_checkpoints, "Keep only the newest N (0 = all)")
      ->capture_default_str();
  add_seed(train);

  // generate
  std::filesystem::path ckpt_path, style_path, gen_data, gen_out;
  std::string char_list;
  std::vector<std::string> raw_protos;
  auto* gen = app.add_subcommand("generate", "One-shot generation from a single style glyph");
  gen->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  gen->add_option("--style", style_path, "Style glyph PNG (any size)")->required()->check(CLI::ExistingFile);
  gen->add_option("--chars", char_list, "Comma-separated character ids")->required();
  gen->add_option("--data", gen_data, "Corpus directory supplying prototypes")->check(CLI::ExistingDirectory);
  gen->add_option("--prototype", raw_protos, "Raw prototype as ID=PNG (repeatable)");
  gen->add_option("--out", gen_out, "Output grid PNG")->required();
  add_seed(gen);

  // eval
  std::filesystem::path eval_ckpt, eval_data, eval_out;
  auto* eval = app.add_subcommand("eval", "Reasonableness (p = q) and effectiveness (p != q) reports");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", eval_out, "Report directory")->required();
  add_seed(eval);

  // serve
  ServiceConfig scfg;
  auto* serve = app.add_subcommand("serve", "Start the HTTP inference service");
  serve->add_option("--host", scfg.host, "Bind address")->capture_default_str();
  serve->add_option("--port", scfg.port, "Port")->capture_default_str();
  serve->add_option("--checkpoints", scfg.checkpoint_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--data", scfg.corpus, "Corpus directory supplying prototypes")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--max-batch", scfg.max_batch, "Most characters per request")->capture_default_str();
  serve->add_option("--timeout", scfg.request_timeout, "Request timeout in seconds")->capture_default_str();
  add_seed(serve);

  std::vector<std::string> args(argv + 1, argv + argc);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* failed = &app;
    for (auto* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return kExitUsage;
  }

  try {
    if (synth->parsed()) {
      write_corpus(synth_corpus(styles, chars, seed), synth_out);
      out << "wrote " << styles << " styles x " << chars << " chars to " << synth_out.string() << "\n";
    } else if (train->parsed()) {
      tune_allocator();
      const CorpusIndex corpus = load_corpus(topt.data);
      std::filesystem::create_directories(topt.out);
      std::unique_ptr<Trainer> trainer;
      if (!topt.resume.empty()) {
        Checkpoint ck = load_checkpoint(topt.resume);
        if (train->count("--epochs")) ck.config.epochs = tc.epochs;
        trainer = std::make_unique<Trainer>(ck, corpus);
      } else {
        TrainConfig cfg = tc;
        if (topt.preset == "desk") {
          const TrainConfig desk = apply_desk_widths(tc);
          if (!train->count("--generator-widths")) cfg.generator.widths = desk.generator.widths;
          if (!train->count("--critic-widths")) cfg.critic.widths = desk.critic.widths;
        }
        cfg.seed = seed;
        trainer = std::make_unique<Trainer>(cfg, corpus);
      }
      std::ofstream metrics(topt.out / "metrics.jsonl", topt.resume.empty() ? std::ios::trunc : std::ios::app);
      if (!metrics) throw std::runtime_error("cannot write metrics log");
      LoopOptions opts;
      opts.checkpoint_dir = topt.out;
      opts.metrics = &metrics;
      opts.keep_checkpoints = topt.keep_checkpoints;
      const Index ipe = trainer->iterations_per_epoch();
      opts.on_step = [&](const MetricsRecord& r) {
        if (r.iteration % ipe == 0) {
          out << "epoch " << r.iteration / ipe << " iteration " << r.iteration << " l1 " << r.losses.l1 << " loss_g "
              << r.losses.loss_g << " loss_d " << r.losses.loss_d << "\n" << std::flush;
        }
      };
      const Checkpoint last = train_loop(*trainer, opts);
      out << "trained to epoch " << last.epoch << " (" << last.iteration << " iterations); checkpoints in "
          << topt.out.string() << "\n";
    } else if (gen->parsed()) {
      const InferenceModel model = InferenceModel::load(ckpt_path);
      std::unique_ptr<CorpusIndex> corpus;
      if (!gen_data.empty()) corpus = std::make_unique<CorpusIndex>(load_corpus(gen_data));
      GenerationRequest req;
      req.style = glyph_from_paper(read_png(style_path));
      try {
        req.char_ids = parse_char_list(char_list);
      } catch (const ServiceError& e) {
        err << "error: --chars: " << e.what() << "\n" << gen->help();
        return kExitUsage;
      }
      for (const auto& spec : raw_protos) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) {
          err << "error: --prototype expects ID=PNG, got '" << spec << "'\n" << gen->help();
          return kExitUsage;
        }
        req.raw_prototypes[std::stoi(spec.substr(0, eq))] = glyph_from_paper(read_png(spec.substr(eq + 1)));
      }
      const auto images = one_shot_generate(model, corpus.get(), req);
      if (gen_out.has_parent_path()) std::filesystem::create_directories(gen_out.parent_path());
      export_grid(images, gen_out);
      out << "wrote " << images.size() << " glyphs to " << gen_out.string() << "\n";
    } else if (eval->parsed()) {
      const InferenceModel model = InferenceModel::load(eval_ckpt);
      const CorpusIndex corpus = load_corpus(eval_data);
      std::filesystem::create_directories(eval_out);
      const EvalReport r = eval_reasonableness(model, corpus);
      const EvalReport e = eval_effectiveness(model, corpus, seed);
      detail::write_text(eval_out / "reasonableness.json", r.to_json());
      detail::write_text(eval_out / "effectiveness.json", e.to_json());
      out << "reasonableness: l1 " << r.mean_l1 << " (identity baseline " << r.mean_baseline_l1 << ")\n"
          << "effectiveness: style match " << e.style_match << " over " << e.pairs.size() << " glyphs\n";
    } else if (serve->parsed()) {
      tune_allocator();
      GlyphService service(scfg);
      httplib::Server server;
      service.install(server);
      detail::active_server() = &server;
      std::signal(SIGINT, [](int) {
        if (auto* s = detail::active_server()) s->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (auto* s = detail::active_server()) s->stop();
      });
      out << "serving on " << scfg.host << ":" << scfg.port << "\n" << std::flush;
      const bool ok = server.listen(scfg.host, scfg.port);
      detail::active_server() = nullptr;
      if (!ok) throw std::runtime_error("cannot listen on " + scfg.host + ":" + std::to_string(scfg.port));
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace wnet
