// Writes Beer-Lambert test patches for the CLI tests:
// make_patches <dir> -> ref.png, src_0.png, src_1.png, white.png

#include <cstdio>
#include <filesystem>

#include "support/beer_lambert.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: make_patches <dir>\n");
    return 1;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir / "in");
  bagforge::write_png(synth_he::make_patch(synth_he::reference_stains(), 1), dir / "ref.png");
  bagforge::write_png(synth_he::make_patch(synth_he::alternate_stains(), 2), dir / "in" / "src_0.png");
  bagforge::write_png(synth_he::make_patch(synth_he::alternate_stains(), 3), dir / "in" / "src_1.png");
  bagforge::write_png(bagforge::RgbPatch(32, 32, 255), dir / "in" / "white.png");
  return 0;
}
