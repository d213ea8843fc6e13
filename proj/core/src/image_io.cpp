#include "flipreid/image_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "flipreid/binary_io.hpp"
#include "flipreid/error.hpp"

namespace flipreid {

namespace fs = std::filesystem;

std::vector<std::uint8_t> encode_image(const Image &image) {
  io::ByteWriter w;
  w.magic("FRID");
  w.u32(image.channels);
  w.u32(image.height);
  w.u32(image.width);
  w.bytes(image.pixels);
  return w.release();
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "FRID image");
  r.expect_magic("FRID");
  Image img;
  img.channels = r.u32();
  img.height = r.u32();
  img.width = r.u32();
  const auto n = std::size_t(img.channels) * img.height * img.width;
  auto px = r.bytes(n);
  img.pixels.assign(px.begin(), px.end());
  r.expect_end();
  return img;
}

void write_image(const fs::path &path, const Image &image) {
  io::write_file_atomic(path, encode_image(image));
}

Image read_image(const fs::path &path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

fs::path write_manifest(const fs::path &dir, const DatasetSplit &split) {
  std::ostringstream csv;
  csv << "path,identity,camera,split\n";
  std::size_t counter = 0;
  for (const auto *set : {&split.train, &split.query, &split.gallery}) {
    for (const auto &s : *set) {
      char name[64];
      std::snprintf(name, sizeof(name), "images/%06zu_%u_c%u.frid", counter++, s.identity, s.camera);
      write_image(dir / name, s.image);
      csv << name << ',' << s.identity << ',' << s.camera << ',' << to_string(s.split) << '\n';
    }
  }
  const auto manifest = dir / "manifest.csv";
  io::write_text_atomic(manifest, csv.str());
  return manifest;
}

namespace {

std::vector<std::string> split_csv_row(const std::string &line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

std::uint32_t parse_u32(const std::string &s, const std::string &what, std::size_t row) {
  std::uint32_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ValidationError("manifest row " + std::to_string(row) + ": invalid " + what + " \"" + s + "\"");
  return v;
}

} // namespace

DatasetSplit ingest_manifest(const fs::path &manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());
  const auto base = manifest_path.parent_path();

  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,identity,camera,split")
    throw ValidationError("manifest header must be \"path,identity,camera,split\", got \"" + line + "\"");

  DatasetSplit out;
  std::map<std::uint32_t, std::size_t> first_row_of_train, first_row_of_test;
  std::set<std::uint32_t> gallery_ids;
  std::map<std::uint32_t, std::size_t> query_rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_row(line);
    if (cells.size() != 4)
      throw ValidationError("manifest row " + std::to_string(row) + ": expected 4 fields, got " +
                            std::to_string(cells.size()));
    Sample s;
    s.identity = parse_u32(cells[1], "identity", row);
    s.camera = parse_u32(cells[2], "camera", row);
    try {
      s.split = parse_split(cells[3]);
    } catch (const ValidationError &e) {
      throw ValidationError("manifest row " + std::to_string(row) + ": " + e.what());
    }
    const fs::path img_path = fs::path(cells[0]).is_absolute() ? fs::path(cells[0]) : base / cells[0];
    if (!fs::exists(img_path))
      throw IoError("manifest row " + std::to_string(row) + ": missing image file " + img_path.string());
    try {
      s.image = read_image(img_path);
    } catch (const FormatError &e) {
      throw FormatError("manifest row " + std::to_string(row) + ": " + e.what());
    }

    if (s.split == Split::train) {
      first_row_of_train.emplace(s.identity, row);
      if (first_row_of_test.count(s.identity))
        throw ValidationError("manifest row " + std::to_string(row) + ": identity " +
                              std::to_string(s.identity) + " appears in both train and test splits");
      out.train.push_back(std::move(s));
    } else {
      first_row_of_test.emplace(s.identity, row);
      if (first_row_of_train.count(s.identity))
        throw ValidationError("manifest row " + std::to_string(row) + ": identity " +
                              std::to_string(s.identity) + " appears in both train and test splits");
      if (s.split == Split::gallery) {
        gallery_ids.insert(s.identity);
        out.gallery.push_back(std::move(s));
      } else {
        query_rows.emplace(s.identity, row);
        out.query.push_back(std::move(s));
      }
    }
  }
  for (const auto &[id, r] : query_rows)
    if (!gallery_ids.count(id))
      throw ValidationError("manifest row " + std::to_string(r) + ": query identity " + std::to_string(id) +
                            " has no gallery entry");
  return out;
}

} // namespace flipreid
