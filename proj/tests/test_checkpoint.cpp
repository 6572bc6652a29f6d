#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "aquadiff/checkpoint.hpp"
#include "aquadiff/image.hpp"
#include "doctest.h"

using namespace aquadiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "aquadiff_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

Checkpoint sample() {
  Checkpoint c;
  c.config_text = "base_channels=16\nT=50\n";
  c.step = 1234;
  c.rng_state = "17 42 99";
  c.tensors.push_back({"conv_in.weight", {2, 1, 1, 2}, {0.5, -0.25, 1.0, 3.0}});
  c.tensors.push_back({"conv_in.bias", {2}, {0.1, -0.2}});
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const fs::path p = scratch("round.ckpt");
  const Checkpoint c = sample();
  save_checkpoint(p, c);
  CHECK_FALSE(fs::exists(p.string() + ".tmp"));
  const Checkpoint back = load_checkpoint(p);
  CHECK(back.config_text == c.config_text);
  CHECK(back.step == 1234u);
  CHECK(back.rng_state == c.rng_state);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].name == "conv_in.weight");
  CHECK(back.tensors[0].shape == ad::Shape{2, 1, 1, 2});
  CHECK(back.tensors[0].values == c.tensors[0].values);
  CHECK(back.tensors[1].values[0] == static_cast<double>(0.1f));
  REQUIRE(back.find("conv_in.bias") != nullptr);
  CHECK(back.find("missing") == nullptr);

  save_checkpoint(scratch("again.ckpt"), back);
  CHECK(slurp(scratch("again.ckpt")) == slurp(p));
}

TEST_CASE("header layout") {
  const fs::path p = scratch("layout.ckpt");
  save_checkpoint(p, sample());
  const std::string bytes = slurp(p);
  CHECK(bytes.substr(0, 4) == "AQDF");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kCheckpointVersion);
  std::uint64_t digest = 0;
  std::memcpy(&digest, bytes.data() + 8, 8);
  CHECK(digest == fnv1a64(sample().config_text));
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("corrupted checkpoints are rejected") {
  const fs::path p = scratch("bad.ckpt");
  save_checkpoint(p, sample());
  const std::string good = slurp(p);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  spit(p, bad_magic);
  CHECK_THROWS_AS(load_checkpoint(p), IoError);

  std::string bad_version = good;
  bad_version[4] = 9;
  spit(p, bad_version);
  CHECK_THROWS_AS(load_checkpoint(p), IoError);

  std::string bad_digest = good;
  const std::size_t text_at = good.find("base_channels");
  bad_digest[text_at] = 'B';
  spit(p, bad_digest);
  CHECK_THROWS_AS(load_checkpoint(p), IoError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, good.size() - 1}) {
    spit(p, good.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(p), IoError);
  }
  spit(p, good + "x");
  CHECK_THROWS_AS(load_checkpoint(p), IoError);

  CHECK_THROWS_AS(load_checkpoint(scratch("does_not_exist.ckpt")), IoError);
  try {
    load_checkpoint(scratch("does_not_exist.ckpt"));
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("does_not_exist.ckpt") != std::string::npos);
  }
}

TEST_CASE("tensor shape must match its data") {
  Checkpoint c = sample();
  c.tensors[0].values.pop_back();
  CHECK_THROWS_AS(save_checkpoint(scratch("shape.ckpt"), c), DimensionError);
}
