// stainnorm: Macenko stain normalization of RGB patches.
//
// Exit codes: 0 success, 1 validation error, 2 runtime abort.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>

#include "bagforge/errors.hpp"
#include "bagforge/stainnorm.hpp"

using namespace bagforge;

int main(int argc, char** argv) {
  CLI::App app{"stainnorm: Macenko stain normalization"};
  app.require_subcommand(1);

  MacenkoParams params;
  auto add_params = [&](CLI::App* cmd) {
    cmd->add_option("--io", params.io, "transmitted-light intensity");
    cmd->add_option("--beta", params.beta, "optical-density transparency threshold");
    cmd->add_option("--alpha", params.alpha, "angular percentile");
  };
  std::string input, reference, out;
  unsigned threads = 1;

  auto* estimate = app.add_subcommand("estimate", "estimate a stain profile from a patch");
  estimate->add_option("patch", input, "PNG patch")->required()->check(CLI::ExistingFile);
  estimate->add_option("--out", out, "profile file (default: stdout)");
  add_params(estimate);

  auto* apply = app.add_subcommand("apply", "normalize one patch against a reference");
  apply->add_option("patch", input, "PNG patch")->required()->check(CLI::ExistingFile);
  apply->add_option("--reference", reference, "reference patch (.png) or profile file")->required()->check(CLI::ExistingFile);
  apply->add_option("--out", out, "output PNG")->required();
  add_params(apply);

  auto* batch = app.add_subcommand("batch", "normalize every PNG in a directory");
  batch->add_option("input_dir", input, "directory of PNG patches")->required()->check(CLI::ExistingDirectory);
  batch->add_option("--reference", reference, "reference patch (.png) or profile file")->required()->check(CLI::ExistingFile);
  batch->add_option("--out", out, "output directory")->required();
  batch->add_option("--threads", threads, "worker threads");
  add_params(batch);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    params.validate();
    if (*estimate) {
      const auto profile = estimate_stains(read_png(input), params);
      if (out.empty()) {
        std::fputs(profile.to_doc().serialize().c_str(), stdout);
      } else {
        profile.save(out);
      }
      return 0;
    }
    // Command-line parameters govern the source estimate; a saved reference
    // profile keeps its own parameters.
    const StainProfile ref = load_reference(reference, params);
    if (*apply) {
      const RgbPatch patch = read_png(input);
      const auto source = estimate_stains(patch, params);
      write_png(normalize_patch(patch, source, ref), out);
      std::printf("%s angle_deg=%s\n", out.c_str(), format_double(stain_angle_deg(source.stain_matrix, ref.stain_matrix)).c_str());
      return 0;
    }
    if (*batch) {
      const auto rows = batch_normalize(input, ref, out, params, threads);
      std::size_t ok = 0;
      for (const auto& r : rows) ok += r.status == "ok" ? 1 : 0;
      std::printf("%zu of %zu patches normalized, report %s\n", ok, rows.size(),
                  (std::filesystem::path(out) / "report.csv").string().c_str());
      return 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "abort: %s\n", e.what());
    return 2;
  }
  return 0;
}
