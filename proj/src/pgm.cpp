#include "restnet/pgm.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "restnet/errors.hpp"

namespace restnet {

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height) != image.pixels.size()) {
    throw IoError("PGM pixel count does not match " + std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& is) {
  std::string token;
  for (int c = is.get(); c != std::char_traits<char>::eof(); c = is.get()) {
    if (c == '#') {
      while (c != '\n' && c != std::char_traits<char>::eof()) c = is.get();
      continue;
    }
    if (std::isspace(c)) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(static_cast<char>(c));
  }
  return token;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  if (header_token(is) != "P5") throw IoError(path.string() + " is not a binary PGM (P5)");
  GrayImage image;
  try {
    image.width = std::stoi(header_token(is));
    image.height = std::stoi(header_token(is));
    if (std::stoi(header_token(is)) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  if (image.width <= 0 || image.height <= 0) throw IoError(path.string() + ": bad PGM dimensions");
  image.pixels.resize(static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height));
  if (!is.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()))) {
    throw IoError(path.string() + ": truncated PGM payload");
  }
  return image;
}

}  // namespace restnet
