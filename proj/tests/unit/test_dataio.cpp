#include <doctest.h>

#include <cstdlib>
#include <set>

#include "susa/dataio/dataio.hpp"
#include "susa/numerics/log.hpp"
#include "test_support.hpp"

using namespace susa;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("susa_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static inline int counter = 0;
};

HsiCube golden_cube() {
  HsiCube cube{Tensor<float>({2, 3, 4}), SensorSpec{"golden", {450, 550.5, 650, 750.25}, {10, 12.5, 10, 20}}, 2.5};
  for (std::size_t i = 0; i < cube.values.size(); ++i) {
    cube.values[i] = static_cast<float>(i) * 0.25f - 1.0f;
  }
  cube.values[5] = -0.0f;
  cube.values[7] = 1e-30f;
  return cube;
}

LabelMap golden_labels() {
  LabelMap m(3, 2, {"asphalt", "meadow", "water"});
  m.ids = {0, 1, 2, 3, 3, 1};
  return m;
}

Checkpoint golden_checkpoint() {
  Checkpoint c;
  c.model_kind = "test";
  c.config = {{"width_scale", 0.5}, {"seed", 7}};
  c.params.emplace_back("enc1.w", ParamKind::weight, Tensor<float>({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6}));
  c.params.emplace_back("enc1.b", ParamKind::bias, Tensor<float>({3}, {-0.5f, 0.0f, 0.5f}));
  c.params.emplace_back("enc1.pelu_a", ParamKind::pelu, Tensor<float>({1}, 1.0f));
  c.params.back().trainable = false;
  return c;
}

void compare_with_golden(const fs::path& produced, const std::string& golden_name) {
  const fs::path golden = fs::path(SUSA_GOLDEN_DIR) / golden_name;
  if (std::getenv("SUSA_REGEN_GOLDEN")) fs::copy_file(produced, golden, fs::copy_options::overwrite_existing);
  INFO("golden file ", golden.string());
  CHECK(read_file(produced) == read_file(golden));
}

}  // namespace

TEST_CASE("cube files") {
  TempDir tmp;
  const auto cube = golden_cube();
  const auto path = tmp.path / "cube.f32";
  save_cube(path, cube);
  SUBCASE("round trip is bitwise identical") {
    const auto back = load_cube(path);
    CHECK(back.spec == cube.spec);
    CHECK(back.gsd_m == cube.gsd_m);
    CHECK(std::memcmp(back.values.data(), cube.values.data(), cube.values.size() * 4) == 0);
  }
  SUBCASE("bytes match the committed golden files") {
    compare_with_golden(path, "cube.f32");
    compare_with_golden(sidecar_path(path), "cube.f32.hdr");
    const auto golden = load_cube(fs::path(SUSA_GOLDEN_DIR) / "cube.f32");
    CHECK(golden.values == cube.values);
  }
  SUBCASE("truncated payload names both byte counts") {
    auto bytes = read_file(path);
    bytes.resize(bytes.size() - 3);
    write_file_atomic(path, bytes);
    try {
      load_cube(path);
      FAIL("expected rejection");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected 96 bytes") != std::string::npos);
      CHECK(msg.find("found 93 bytes") != std::string::npos);
    }
  }
  SUBCASE("payload size follows the header dimensions") {
    std::string hdr = "height = 610\nwidth = 340\nbands = 103\nsensor = rosis\ngsd_m = 1.3\n";
    std::string centers, fwhm;
    for (int b = 0; b < 103; ++b) {
      centers += std::to_string(430 + 4 * b) + " ";
      fwhm += "4 ";
    }
    hdr += "band_centers_nm = " + centers + "\nfwhm_nm = " + fwhm + "\ndtype = f32le\ninterleave = bip\n";
    const auto p = tmp.path / "pavia.f32";
    write_file_atomic(sidecar_path(p), hdr);
    write_file_atomic(p, "");
    try {
      load_cube(p);
      FAIL("expected rejection");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("expected " + std::to_string(610 * 340 * 103 * 4) + " bytes") !=
            std::string::npos);
    }
  }
  SUBCASE("missing header field is reported") {
    write_file_atomic(sidecar_path(path), "height = 2\nwidth = 3\n");
    CHECK_THROWS_WITH_AS(load_cube(path), doctest::Contains("bands"), FormatError);
  }
}

TEST_CASE("import_raw reads other layouts") {
  TempDir tmp;
  // 2x2 pixels, 3 bands, values v(r,c,b) = 100r + 10c + b, stored band-sequential as int16
  std::string bytes;
  for (int b = 0; b < 3; ++b)
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        const std::int16_t v = static_cast<std::int16_t>((r == 1 && c == 1 && b == 2) ? -7 : 100 * r + 10 * c + b);
        bytes.append(reinterpret_cast<const char*>(&v), 2);
      }
  const auto p = tmp.path / "raw.bsq";
  write_file_atomic(p, "HEAD" + bytes);
  write_file_atomic(sidecar_path(p),
                    "height = 2\nwidth = 2\nbands = 3\nband_centers_nm = 500 600 700\n"
                    "fwhm_nm = 10 10 10\ndtype = i16le\ninterleave = bsq\nheader_offset = 4\n");
  const auto cube = import_raw(p);
  CHECK(cube.values[(1 * 2 + 0) * 3 + 1] == 101.0f);
  CHECK(cube.values[(0 * 2 + 1) * 3 + 2] == 12.0f);
  CHECK(cube.values[(1 * 2 + 1) * 3 + 2] == -7.0f);
}

TEST_CASE("label files") {
  TempDir tmp;
  const auto labels = golden_labels();
  const auto path = tmp.path / "labels.u16";
  save_labels(path, labels);
  CHECK(load_labels(path) == labels);
  compare_with_golden(path, "labels.u16");
  compare_with_golden(sidecar_path(path), "labels.u16.hdr");
  CHECK(load_labels(fs::path(SUSA_GOLDEN_DIR) / "labels.u16") == labels);
  LabelMap bad = labels;
  bad.ids[0] = 4;
  CHECK_THROWS(save_labels(path, bad));
}

TEST_CASE("tensor files") {
  TempDir tmp;
  const auto t = test::random_tensor<float>(3, {4, 5, 6});
  save_tensor(tmp.path / "f.f32", t, "features");
  std::string kind;
  CHECK(load_tensor(tmp.path / "f.f32", &kind) == t);
  CHECK(kind == "features");
}

TEST_CASE("checkpoints") {
  TempDir tmp;
  const auto ckpt = golden_checkpoint();
  const auto path = tmp.path / "model.ckpt";
  save_checkpoint(path, ckpt);
  SUBCASE("round trip restores every parameter bit for bit") {
    const auto back = load_checkpoint(path);
    CHECK(back.model_kind == "test");
    CHECK(back.config == ckpt.config);
    REQUIRE(back.params.size() == ckpt.params.size());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      CHECK(back.params[i].name == ckpt.params[i].name);
      CHECK(back.params[i].kind == ckpt.params[i].kind);
      CHECK(back.params[i].trainable == ckpt.params[i].trainable);
      CHECK(back.params[i].value == ckpt.params[i].value);
    }
    compare_with_golden(path, "model.ckpt");
  }
  SUBCASE("size is the parameter payload plus the manifest") {
    const auto bytes = read_file(path);
    const auto first_line = bytes.substr(0, bytes.find('\n') + 1);
    const auto manifest_bytes = std::stoul(first_line.substr(first_line.rfind(' ')));
    CHECK(bytes.size() == first_line.size() + manifest_bytes + 10 * 4);
  }
  SUBCASE("edited shape is rejected") {
    auto bytes = read_file(path);
    const auto at = bytes.find("\"shape\": [\n        1,\n        1,\n        2,\n        3");
    REQUIRE(at != std::string::npos);
    bytes.replace(bytes.find("3", at + 40), 1, "4");
    write_file_atomic(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("truncated payload is rejected") {
    auto bytes = read_file(path);
    bytes.pop_back();
    write_file_atomic(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
}

TEST_CASE("sample_patches") {
  SyntheticSceneSpec spec;
  spec.height = 40;
  spec.width = 48;
  spec.bands = 5;
  const auto a = synth_scene(spec).cube;
  SUBCASE("default split is 90/10") {
    const auto s = sample_patches({a}, 50000, 32, 1);
    CHECK(s.train.size() == 45000);
    CHECK(s.validation.size() == 5000);
  }
  SUBCASE("a cube the size of the patch has one position") {
    HsiCube exact{Tensor<float>({32, 32, 5}), a.spec, 1.0};
    const auto s = sample_patches({exact}, 10, 32, 3);
    for (const auto& v : {s.train, s.validation})
      for (const auto& pc : v) CHECK(pc == PatchCoord{0, 0, 0});
  }
  SUBCASE("seeded and in bounds") {
    const auto s1 = sample_patches({a, a}, 500, 16, 9), s2 = sample_patches({a, a}, 500, 16, 9);
    CHECK(s1.train == s2.train);
    CHECK(s1.validation == s2.validation);
    CHECK_FALSE(s1.train == sample_patches({a, a}, 500, 16, 10).train);
    for (const auto& pc : s1.train) {
      CHECK(pc.row + 16 <= 40);
      CHECK(pc.col + 16 <= 48);
    }
  }
  SUBCASE("cubes are weighted by their number of positions") {
    HsiCube big{Tensor<float>({64, 64, 5}), a.spec, 1.0}, small{Tensor<float>({16, 16, 5}), a.spec, 1.0};
    // positions: 49*49 = 2401 and 1
    const auto s = sample_patches({small, big}, 20000, 16, 4, 0.0);
    std::size_t from_small = 0;
    for (const auto& pc : s.train) from_small += pc.cube == 0;
    CHECK(from_small < 30);
  }
  SUBCASE("too-small cubes are skipped with a warning") {
    std::vector<std::string> lines;
    log::set_sink([&](const std::string& l) { lines.push_back(l); });
    HsiCube tiny{Tensor<float>({8, 8, 5}), a.spec, 1.0};
    const auto s = sample_patches({tiny, a}, 50, 32, 2);
    log::set_sink([](const std::string&) {});
    for (const auto& pc : s.train) CHECK(pc.cube == 1);
    REQUIRE(lines.size() == 1);
    CHECK(lines[0].find("patch_cube_skipped") != std::string::npos);
  }
  SUBCASE("gathered patches copy the cube") {
    const auto s = sample_patches({a}, 5, 8, 5);
    const auto t = gather_patches({a}, s.train, 8);
    CHECK(t.shape() == Shape{4, 8, 8, 5});
    const auto& pc = s.train[2];
    CHECK(t.at(2, 3, 4, 1) == a.values[((pc.row + 3) * 48 + pc.col + 4) * 5 + 1]);
  }
}

TEST_CASE("synth_scene") {
  SyntheticSceneSpec spec;
  spec.classes = 5;
  spec.bands = 16;
  spec.seed = 12;
  SUBCASE("noise-free scene has one spectrum per class") {
    spec.noise = 0;
    spec.variation = 0;
    const auto s = synth_scene(spec);
    for (std::size_t p = 0; p < s.labels.ids.size(); ++p) {
      const auto& e = s.endmembers[s.labels.ids[p] - 1];
      for (std::size_t b = 0; b < 16; ++b) CHECK(s.cube.values[p * 16 + b] == static_cast<float>(e[b]));
    }
  }
  SUBCASE("every class appears and the map is fully labeled") {
    const auto s = synth_scene(spec);
    std::set<std::uint16_t> seen(s.labels.ids.begin(), s.labels.ids.end());
    CHECK(seen.size() == 5);
    CHECK(*seen.begin() == 1);
    CHECK(s.labels.classes() == 5);
  }
  SUBCASE("class means recover the endmembers within the noise bound") {
    spec.variation = 0;
    spec.noise = 0.05;
    const auto s = synth_scene(spec);
    std::vector<std::vector<double>> sum(5, std::vector<double>(16, 0.0));
    std::vector<double> n(5, 0.0);
    for (std::size_t p = 0; p < s.labels.ids.size(); ++p) {
      const auto c = s.labels.ids[p] - 1;
      n[c] += 1;
      for (std::size_t b = 0; b < 16; ++b) sum[c][b] += s.cube.values[p * 16 + b];
    }
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t b = 0; b < 16; ++b)
        CHECK(std::abs(sum[c][b] / n[c] - s.endmembers[c][b]) < 5 * 0.05 / std::sqrt(n[c]));
  }
  SUBCASE("endmembers respect the minimum angle") {
    spec.min_angle_deg = 10;
    const auto s = synth_scene(spec);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < i; ++j) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t b = 0; b < 16; ++b) {
          ab += s.endmembers[i][b] * s.endmembers[j][b];
          aa += s.endmembers[i][b] * s.endmembers[i][b];
          bb += s.endmembers[j][b] * s.endmembers[j][b];
        }
        CHECK(std::acos(ab / std::sqrt(aa * bb)) * 180 / 3.141592653589793 >= 10 - 1e-9);
      }
  }
  SUBCASE("deterministic in the seed") {
    CHECK(synth_scene(spec).cube.values == synth_scene(spec).cube.values);
  }
  spec.classes = 1;
  CHECK_THROWS(synth_scene(spec));
}

TEST_CASE("lowshot_split") {
  SyntheticSceneSpec spec;
  spec.classes = 4;
  spec.seed = 3;
  const auto labels = synth_scene(spec).labels;
  std::vector<std::size_t> counts(4, 0);
  for (auto id : labels.ids) ++counts[id - 1];
  SUBCASE("L = 10 is exact, duplicate-free, labeled, and seeded") {
    const auto s = lowshot_split(labels, 10, 5);
    std::set<Pixel> all;
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(s.pixels[c].size() == 10);
      for (const auto& [r, col] : s.pixels[c]) {
        CHECK(labels.at(r, col) == c + 1);
        all.insert({r, col});
      }
    }
    CHECK(all.size() == 40);
    CHECK(lowshot_split(labels, 10, 5).pixels == s.pixels);
    CHECK_FALSE(lowshot_split(labels, 10, 6).pixels == s.pixels);
  }
  SUBCASE("L equal to the class size takes every labeled pixel") {
    const std::size_t most = *std::max_element(counts.begin(), counts.end());
    const auto s = lowshot_split(labels, most, 1);
    CHECK(s.total() == labels.ids.size());
    CHECK(evaluation_pixels(labels, s, false).empty());
    CHECK(evaluation_pixels(labels, s, true).size() == labels.ids.size());
  }
  SUBCASE("per-class overrides are honored") {
    const auto s = lowshot_split(labels, 50, 2, {{3, 15}});
    CHECK(s.pixels[2].size() == 15);
    CHECK(s.pixels[0].size() == 50);
    CHECK(s.requested == std::vector<std::size_t>{50, 50, 15, 50});
  }
  SUBCASE("short classes take everything and record the shortfall") {
    LabelMap m(2, 2, {"a", "b", "c"});
    m.ids = {1, 1, 2, 1};
    const auto s = lowshot_split(m, 2, 0);
    CHECK(s.pixels[1].size() == 1);
    CHECK(s.shortfall == std::vector<std::size_t>{0, 1, 2});
  }
  SUBCASE("exclusive evaluation never contains training pixels") {
    const auto s = lowshot_split(labels, 10, 8);
    const auto eval = evaluation_pixels(labels, s, false);
    CHECK(eval.size() == labels.ids.size() - 40);
    std::set<Pixel> ev(eval.begin(), eval.end());
    for (const auto& cls : s.pixels)
      for (const auto& px : cls) CHECK(ev.count(px) == 0);
  }
  SUBCASE("json round trip") {
    const auto s = lowshot_split(labels, 7, 4);
    const auto back = split_from_json(to_json(s));
    CHECK(back.pixels == s.pixels);
    CHECK(back.seed == 4);
  }
}
