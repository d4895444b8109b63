#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "hafusion/dataset.hpp"
#include "hafusion/sha256.hpp"

using namespace hafusion;
using namespace hafusion::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("hafusion_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RegionDataset small_fixture() {
  RegionDataset ds;
  ds.n = 5;
  ds.region_ids = {"a", "b", "c", "d", "e"};
  ViewMatrix mob;
  mob.name = "mobility";
  mob.kind = ViewKind::mobility;
  mob.matrix = Tensor<double>({5, 5}, 1.0);
  mob.matrix.at2(0, 1) = 7.0;
  ds.views.push_back(mob);
  ViewMatrix poi;
  poi.name = "poi";
  poi.kind = ViewKind::categorical_count;
  poi.matrix = Tensor<double>({5, 3}, 2.0);
  poi.matrix.at2(4, 2) = 0.5;
  poi.category_labels = {"p0", "p1", "p2"};
  ds.views.push_back(poi);
  ViewMatrix lu;
  lu.name = "landuse";
  lu.kind = ViewKind::categorical_count;
  lu.matrix = Tensor<double>({5, 2}, 3.0);
  lu.category_labels = {"l0", "l1"};
  ds.views.push_back(lu);
  ds.targets["crime"] = {1.0, 2.0, 3.0, 4.0, 5.5};
  return ds;
}

}  // namespace

TEST_CASE("sha256 reference vectors") {
  CHECK(Sha256::hex_of("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(Sha256::hex_of("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(Sha256::hex_of(std::string(1000, 'x')).size() == 64);
}

TEST_CASE("dataset round trip") {
  auto dir = temp_dir("roundtrip");
  RegionDataset ds = small_fixture();
  write_dataset(ds, dir);
  RegionDataset back = load_dataset(dir);
  CHECK(back.n == 5);
  CHECK(back.views.size() == 3);
  CHECK(back.region_ids == ds.region_ids);
  CHECK(back.fingerprint() == ds.fingerprint());
  CHECK(back.targets.at("crime") == ds.targets.at("crime"));
  for (std::size_t v = 0; v < 3; ++v) {
    REQUIRE(back.views[v].matrix.shape() == ds.views[v].matrix.shape());
    for (std::size_t i = 0; i < ds.views[v].matrix.numel(); ++i)
      CHECK(back.views[v].matrix[i] == ds.views[v].matrix[i]);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset validation errors name the offending file") {
  SECTION("row count mismatch in mobility.csv") {
    auto dir = temp_dir("rowcount");
    write_dataset(small_fixture(), dir);
    std::ofstream out(dir / "mobility.csv", std::ios::trunc);
    out << "1,1,1,1,1\n2,2,2,2,2\n3,3,3,3,3\n4,4,4,4,4\n";  // 4 rows for n=5
    out.close();
    CHECK_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("mobility.csv"));
    fs::remove_all(dir);
  }
  SECTION("negative count") {
    auto dir = temp_dir("negative");
    write_dataset(small_fixture(), dir);
    std::ofstream out(dir / "poi.csv", std::ios::trunc);
    out << "1,1,1\n1,1,1\n1,-1,1\n1,1,1\n1,1,1\n";
    out.close();
    CHECK_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("negative count"));
    fs::remove_all(dir);
  }
  SECTION("non numeric cell") {
    auto dir = temp_dir("nonnum");
    write_dataset(small_fixture(), dir);
    std::ofstream out(dir / "landuse.csv", std::ios::trunc);
    out << "1,1\n1,oops\n1,1\n1,1\n1,1\n";
    out.close();
    CHECK_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("row 2"));
    fs::remove_all(dir);
  }
  SECTION("missing file") {
    auto dir = temp_dir("missing");
    write_dataset(small_fixture(), dir);
    fs::remove(dir / "poi.csv");
    CHECK_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("missing file"));
    fs::remove_all(dir);
  }
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.n = 50;
  cfg.latent_dim = 4;
  cfg.noise_level = 0.0;
  cfg.seed = 7;

  SECTION("shapes follow the config") {
    RegionDataset ds = generate_synthetic(cfg);
    CHECK(ds.n == 50);
    CHECK(ds.views.size() == 3);
    CHECK(ds.views[0].matrix.shape() == Shape{50, 50});
    CHECK(ds.views[1].matrix.shape() == Shape{50, 26});
    CHECK(ds.views[2].matrix.shape() == Shape{50, 12});
    CHECK(ds.targets.size() == 2);
  }
  SECTION("same seed gives byte-identical datasets") {
    auto d1 = temp_dir("synth1");
    auto d2 = temp_dir("synth2");
    write_dataset(generate_synthetic(cfg), d1);
    write_dataset(generate_synthetic(cfg), d2);
    for (const auto& entry : fs::directory_iterator(d1)) {
      const auto rel = entry.path().filename();
      CHECK(io::read_text_file(d1 / rel) == io::read_text_file(d2 / rel));
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
  }
  SECTION("different seeds differ") {
    SynthConfig other = cfg;
    other.seed = 8;
    CHECK(generate_synthetic(cfg).fingerprint() != generate_synthetic(other).fingerprint());
  }
  SECTION("noise-free targets are exactly linear in the latents") {
    SynthDetail det = generate_synthetic_detailed(cfg);
    const auto& w = det.task_weights.at("count_a");
    const auto& y = det.dataset.targets.at("count_a");
    // recover the intercept from region 0, then check every region
    double b0 = y[0];
    for (std::size_t a = 0; a < w.size(); ++a) b0 -= w[a] * det.latents.at2(0, a);
    for (std::size_t i = 0; i < det.dataset.n; ++i) {
      double pred = b0;
      for (std::size_t a = 0; a < w.size(); ++a) pred += w[a] * det.latents.at2(i, a);
      CHECK(y[i] == Catch::Approx(std::max(0.0, pred)).margin(1e-9));
    }
  }
  SECTION("config validation") {
    SynthConfig bad = cfg;
    bad.n = 5;
    CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
  }
}

TEST_CASE("k-fold splitting") {
  SECTION("ten folds of eighteen at n=180") {
    auto folds = split_kfold(180, 10, 3);
    REQUIRE(folds.size() == 10);
    for (const auto& f : folds) {
      CHECK(f.second.size() == 18);
      CHECK(f.first.size() == 162);
    }
  }
  SECTION("leave one out at n=k=10") {
    auto folds = split_kfold(10, 10, 1);
    REQUIRE(folds.size() == 10);
    for (const auto& f : folds) CHECK(f.second.size() == 1);
  }
  SECTION("test folds partition the index set") {
    auto folds = split_kfold(53, 7, 5);
    std::set<std::size_t> seen;
    for (const auto& f : folds) {
      for (auto i : f.second) {
        CHECK(!seen.count(i));
        seen.insert(i);
      }
      // train and test are disjoint and cover everything
      std::set<std::size_t> all(f.first.begin(), f.first.end());
      for (auto i : f.second) CHECK(!all.count(i));
      CHECK(f.first.size() + f.second.size() == 53);
    }
    CHECK(seen.size() == 53);
  }
  SECTION("deterministic for a fixed seed") {
    CHECK(split_kfold(40, 5, 9) == split_kfold(40, 5, 9));
  }
  SECTION("k larger than n is an error") {
    CHECK_THROWS_AS(split_kfold(5, 10, 0), ConfigError);
  }
}
