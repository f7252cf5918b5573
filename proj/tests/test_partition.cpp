#include <catch2/catch_amalgamated.hpp>

#include <zlib.h>

#include <filesystem>
#include <fstream>

#include "privpart/data.hpp"
#include "privpart/partition.hpp"

using namespace privpart;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "privpart_partition";
  fs::create_directories(dir);
  return dir / name;
}

Network<float> make_mlp(uint64_t seed) {
  Network<float> net({12}, {LayerSpec::dense(10, Activation::relu),
                            LayerSpec::dropout(0.1),
                            LayerSpec::dense(8, Activation::relu),
                            LayerSpec::dense(4, Activation::none)});
  Rng rng(seed);
  net.init_params(rng);
  return net;
}

Tensor<float> make_input(size_t n, size_t d, uint64_t seed) {
  Tensor<float> x({n, d});
  Rng rng(seed);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(rng.uniform());
  return x;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::vector<uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

// Rewrites the trailing crc so tampering tests exercise later validation.
void fix_crc(std::vector<uint8_t>& bytes) {
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  for (int i = 0; i < 4; ++i)
    bytes[bytes.size() - 4 + i] = uint8_t(crc >> (8 * i));
}

}  // namespace

TEST_CASE("split rejects cuts outside the stack") {
  Network<float> net = make_mlp(1);
  CHECK_THROWS_AS(split(net, 0), Error);
  CHECK_THROWS_AS(split(net, 4), Error);
  CHECK_NOTHROW(split(net, 1));
  CHECK_NOTHROW(split(net, 3));
}

TEST_CASE("composition through the cut is bitwise exact") {
  Network<float> net = make_mlp(2);
  Tensor<float> x = make_input(5, 12, 3);
  Tensor<float> full = net.forward(x);
  for (size_t cut = 1; cut < 4; ++cut) {
    BipartiteNetwork<float> bp = split(net, cut);
    CHECK(bp.hidden_shape == net.layer_shapes()[cut - 1]);
    Tensor<float> h = bp.local_forward(x);
    CHECK(bp.remote_forward(h).bitwise_equal(full));
    CHECK(bp.forward(x).bitwise_equal(full));
  }
}

TEST_CASE("composition holds for a conv stack") {
  Network<float> net({1, 14, 14},
                     {LayerSpec::conv2d(4, 3, 1, 1, Activation::relu),
                      LayerSpec::maxpool2d(2, 2), LayerSpec::flatten(),
                      LayerSpec::dense(6, Activation::none)});
  Rng rng(4);
  net.init_params(rng);
  Tensor<float> x({2, 1, 14, 14});
  Rng xr(5);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(xr.uniform());
  Tensor<float> full = net.forward(x);
  BipartiteNetwork<float> bp = split(net, 2);
  CHECK(bp.hidden_shape == Shape{4, 7, 7});
  CHECK(bp.remote_forward(bp.local_forward(x)).bitwise_equal(full));
}

TEST_CASE("merge inverts split") {
  Network<float> net = make_mlp(6);
  BipartiteNetwork<float> bp = split(net, 2);
  Network<float> again = merge(bp);
  Tensor<float> x = make_input(3, 12, 7);
  CHECK(again.forward(x).bitwise_equal(net.forward(x)));
  CHECK(again.params().count() == net.params().count());
  for (const auto& name : net.params().names())
    CHECK(again.params().at(name).bitwise_equal(net.params().at(name)));
}

TEST_CASE("partition file round trip") {
  Network<float> net = make_mlp(8);
  BipartiteNetwork<float> bp = split(net, 2);
  bp.lock_local();
  const fs::path p = scratch("roundtrip.pprt");
  save_partition(bp, p.string());
  BipartiteNetwork<float> back = load_partition<float>(p.string());
  CHECK(back.cut == 2);
  CHECK(back.local_locked);
  CHECK(back.hidden_shape == bp.hidden_shape);
  Tensor<float> x = make_input(4, 12, 9);
  CHECK(back.forward(x).bitwise_equal(bp.forward(x)));
  CHECK(back.local_forward(x).bitwise_equal(bp.local_forward(x)));
  for (const auto& name : bp.remote.params().names())
    CHECK(back.remote.params().at(name).bitwise_equal(
        bp.remote.params().at(name)));
}

TEST_CASE("partition file detects tampering") {
  Network<float> net = make_mlp(10);
  BipartiteNetwork<float> bp = split(net, 1);
  const fs::path p = scratch("tamper.pprt");
  save_partition(bp, p.string());

  SECTION("flipped payload byte fails the checksum") {
    std::vector<uint8_t> bytes = slurp(p);
    bytes[bytes.size() / 2] ^= 0x40;
    spit(p, bytes);
    CHECK_THROWS_WITH(load_partition<float>(p.string()),
                      Catch::Matchers::ContainsSubstring("checksum"));
  }
  SECTION("truncation is caught") {
    std::vector<uint8_t> bytes = slurp(p);
    bytes.resize(bytes.size() - 9);
    spit(p, bytes);
    CHECK_THROWS_AS(load_partition<float>(p.string()), IoError);
  }
  SECTION("bad magic is caught") {
    std::vector<uint8_t> bytes = slurp(p);
    bytes[0] = 'X';
    spit(p, bytes);
    CHECK_THROWS_WITH(load_partition<float>(p.string()),
                      Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("unsupported version is refused even with a valid crc") {
    std::vector<uint8_t> bytes = slurp(p);
    bytes[4] = 9;
    fix_crc(bytes);
    spit(p, bytes);
    CHECK_THROWS_WITH(load_partition<float>(p.string()),
                      Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("missing file") {
    CHECK_THROWS_AS(load_partition<float>(scratch("absent.pprt").string()),
                    IoError);
  }
}

TEST_CASE("loading into double casts the float payload") {
  Network<float> net = make_mlp(11);
  BipartiteNetwork<float> bp = split(net, 2);
  const fs::path p = scratch("cast.pprt");
  save_partition(bp, p.string());
  BipartiteNetwork<double> back = load_partition<double>(p.string());
  const Tensor<float>& w32 = bp.local.params().at("L0.W");
  const Tensor<double>& w64 = back.local.params().at("L0.W");
  REQUIRE(w64.size() == w32.size());
  for (size_t i = 0; i < w32.size(); ++i)
    CHECK(w64[i] == static_cast<double>(w32[i]));
}

TEST_CASE("validate_params spots missing and misshapen tensors") {
  Network<float> net({4}, {LayerSpec::dense(3, Activation::none)});
  CHECK_THROWS_WITH(net.validate_params(),
                    Catch::Matchers::ContainsSubstring("missing parameter"));
  net.params().add("L0.W", Tensor<float>({4, 2}));
  net.params().add("L0.b", Tensor<float>({3}));
  CHECK_THROWS_AS(net.validate_params(), ShapeError);
  Network<float> ok({4}, {LayerSpec::dense(3, Activation::none)});
  Rng rng(1);
  ok.init_params(rng);
  CHECK_NOTHROW(ok.validate_params());
}

TEST_CASE("partition suite lookup by cut") {
  Network<float> net = make_mlp(12);
  PartitionSuite<float> suite;
  suite.members.push_back(split(net, 1));
  suite.members.push_back(split(net, 3));
  CHECK(suite.at_cut(3).cut == 3);
  CHECK_THROWS_AS(suite.at_cut(2), Error);
}
