#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "httplib.h"
#include "pluralfill/errors.hpp"
#include "pluralfill/pipeline.hpp"
#include "pluralfill/service.hpp"

using namespace pluralfill;
using nlohmann::json;

namespace {

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os << j.dump(2) << '\n';
  std::cerr << "wrote " << path << '\n';
}

void write_eval_csv(const json& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  os << "variant,sampling,bucket,psnr,ssim,desk_lpips,desk_fid,masked_psnr\n";
  for (const auto& r : report["rows"]) {
    os << r["variant"].get<std::string>() << ',' << r["sampling"].get<std::string>() << ','
       << r["bucket"].get<std::string>() << ',' << r["psnr"] << ',' << r["ssim"] << ',' << r["desk_lpips"] << ','
       << (r["desk_fid"].is_null() ? std::string() : r["desk_fid"].dump()) << ',' << r["masked_psnr"] << '\n';
  }
}

void print_table(const json& report) {
  std::printf("%-7s %-9s %-6s %8s %7s %10s %9s %9s\n", "variant", "sampling", "bucket", "PSNR", "SSIM", "desk-LPIPS",
              "desk-FID", "mPSNR");
  for (const auto& r : report["rows"]) {
    std::printf("%-7s %-9s %-6s %8.3f %7.4f %10.4f %9s %9.3f\n", r["variant"].get<std::string>().c_str(),
                r["sampling"].get<std::string>().c_str(), r["bucket"].get<std::string>().c_str(),
                r["psnr"].get<double>(), r["ssim"].get<double>(), r["desk_lpips"].get<double>(),
                r["desk_fid"].is_null() ? "-" : std::to_string(r["desk_fid"].get<double>()).c_str(),
                r["masked_psnr"].get<double>());
  }
}

std::filesystem::path ckpt_dir(const RunConfig& cfg, const std::string& override_dir) {
  return override_dir.empty() ? std::filesystem::path(cfg.output_dir) : std::filesystem::path(override_dir);
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pluralfill: code-shared VQ inpainting at toy scale"};
  app.require_subcommand(1);

  std::string config_path, ckpt, out, stage = "all", buckets, csv;
  int port = 8080, runs = 5;

  auto* init = app.add_subcommand("init-config", "write the toy config with all defaults");
  init->add_option("--out", out, "destination")->required();

  auto* train = app.add_subcommand("train", "run training stages");
  train->add_option("--stage", stage, "codebook, transformer, refiner or all")
      ->check(CLI::IsMember({"codebook", "transformer", "refiner", "all"}));
  train->add_option("--config", config_path)->required();
  train->add_option("--ckpt", ckpt, "checkpoint directory (default: output_dir)");

  auto* eval = app.add_subcommand("eval", "table of desk metrics per mask bucket");
  eval->add_option("--config", config_path)->required();
  eval->add_option("--ckpt", ckpt);
  eval->add_option("--buckets", buckets, "e.g. 20-30,30-40,40-50");
  eval->add_option("--out", out, "JSON report path (default stdout)");
  eval->add_option("--csv", csv, "also write rows as CSV");

  auto* bench = app.add_subcommand("bench-sampling", "one-time vs autoregressive sampling");
  bench->add_option("--config", config_path)->required();
  bench->add_option("--ckpt", ckpt);
  bench->add_option("--runs", runs, "timed warm runs")->check(CLI::PositiveNumber);
  bench->add_option("--out", out);

  auto* serve = app.add_subcommand("serve", "HTTP API for the editor");
  serve->add_option("--config", config_path);
  serve->add_option("--ckpt", ckpt);
  serve->add_option("--port", port)->check(CLI::Range(0, 65535));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) {
      save_run_config(out, toy_config());
      std::cerr << "wrote " << out << '\n';
      return 0;
    }
    if (*serve) {
      std::string dir = ckpt;
      if (dir.empty() && !config_path.empty()) dir = load_run_config(config_path).output_dir;
      EditService service;
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
      });
      std::thread loader([&] {
        if (!dir.empty()) {
          try {
            service.load(dir);
            std::cerr << "loaded model from " << dir << '\n';
          } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
          }
        }
        service.set_ready();
      });
      const std::string host = bind_address();
      std::cerr << "listening on " << host << ':' << port << '\n';
      const bool ok = server.listen(host, port);
      loader.join();
      if (!ok) throw Error("cannot listen on " + host + ":" + std::to_string(port));
      return 0;
    }

    const RunConfig cfg = load_run_config(config_path);
    const auto dir = ckpt_dir(cfg, ckpt);
    if (*train) {
      for (const auto& s : train_stages(cfg, stage, dir, &std::cerr)) {
        std::cerr << s.stage << ": " << s.checkpoint.string() << " (" << s.seconds << " s), log " << s.log.string()
                  << '\n';
      }
      return 0;
    }
    const Pipeline p = load_pipeline(dir);
    const Dataset data = make_dataset(cfg.dataset);
    if (*eval) {
      const json report = evaluate(cfg, p, data.test, parse_buckets(buckets.empty() ? cfg.eval.buckets : buckets));
      if (!out.empty()) print_table(report);
      if (!csv.empty()) write_eval_csv(report, csv);
      write_json(report, out);
    } else if (*bench) {
      write_json(bench_sampling(cfg, p, data.test, runs), out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
