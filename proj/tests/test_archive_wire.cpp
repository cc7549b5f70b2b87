#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "linsem/archive.hpp"
#include "linsem/wire.hpp"
#include "test_util.hpp"

using namespace linsem;
namespace fs = std::filesystem;

namespace {

ProbeWeights random_probe(std::uint64_t seed, int m, const std::vector<int>& depths) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  ProbeWeights w = ProbeWeights::zeros(m, depths);
  for (Matrix& t : w.layers)
    for (double& v : t.data()) v = n(rng);
  w.round_to_float();
  return w;
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("linsem_test_" + name); }

// Bit patterns of every weight, so -0.0 and NaN payloads would also be compared.
std::vector<std::uint64_t> bits_of(const ProbeWeights& w) {
  std::vector<std::uint64_t> out;
  for (const Matrix& t : w.layers)
    for (double v : t.data()) {
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      out.push_back(u);
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tar container

TEST(Tar, RoundTripAndDeterministic) {
  const std::vector<TarEntry> entries{{"a.txt", "hello"}, {"empty.bin", ""}, {"big.bin", std::string(1500, 'x')}};
  const std::string bytes = write_tar(entries);
  EXPECT_EQ(bytes.size() % 512, 0u);
  EXPECT_EQ(bytes, write_tar(entries));
  const auto back = read_tar(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, entries[i].name);
    EXPECT_EQ(back[i].data, entries[i].data);
  }
}

TEST(Tar, ReadableBySystemTar) {
  if (std::system("tar --version > /dev/null 2>&1") != 0) GTEST_SKIP() << "no tar binary";
  const fs::path p = temp_path("sys.tar");
  write_file(p.string(), write_tar({{"metadata.json", "{}\n"}, {"layer_0.f32", std::string(8, '\1')}}));
  const std::string cmd = "tar -tf " + p.string() + " > " + p.string() + ".list";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(read_file(p.string() + ".list"), "metadata.json\nlayer_0.f32\n");
  fs::remove(p);
  fs::remove(p.string() + ".list");
}

TEST(Tar, CorruptionDetected) {
  std::string bytes = write_tar({{"a.txt", "hello"}});
  bytes[10] ^= 0x40;  // inside the name field; checksum no longer matches
  EXPECT_THROW(read_tar(bytes), ArchiveFormatError);
  EXPECT_THROW(read_tar("not a tar"), ArchiveFormatError);
  EXPECT_THROW(read_tar(write_tar({{"a.txt", "hello"}}).substr(0, 512)), ArchiveFormatError);
}

// ---------------------------------------------------------------------------
// Probe archives

TEST(ProbeArchive, BitExactRoundTrip) {
  const SyntheticGenerator gen(GeneratorConfig{});
  const ProbeWeights w = random_probe(1, 5, gen.layer_depths());
  ArchiveInfo info = archive_info_for(gen);
  info.shots = 8;
  info.iterations = 1000;
  const fs::path p = temp_path("probe.tar");
  save_probe(p.string(), w, info);
  const LoadedProbe back = load_probe(p.string(), gen);
  EXPECT_EQ(bits_of(back.weights), bits_of(w));
  EXPECT_EQ(back.weights.layer_depths, w.layer_depths);
  EXPECT_EQ(back.weights.class_names, w.class_names);
  EXPECT_EQ(back.info.generator_config_hash, gen.config_hash());
  EXPECT_EQ(back.info.layer_resolutions, (std::vector<int>{4, 8, 16, 32, 64}));
  EXPECT_EQ(back.info.shots, 8);
  EXPECT_EQ(back.info.iterations, 1000u);
  // Re-encoding the loaded weights reproduces the file byte for byte.
  EXPECT_EQ(encode_probe(back.weights, back.info), read_file(p.string()));
  fs::remove(p);
}

TEST(ProbeArchive, MetadataIsReadableJson) {
  const SyntheticGenerator gen(testutil::small_config());
  const std::string bytes = encode_probe(random_probe(2, 3, gen.layer_depths()), archive_info_for(gen));
  const auto entries = read_tar(bytes);
  ASSERT_EQ(entries.front().name, "metadata.json");
  const auto meta = nlohmann::json::parse(entries.front().data);
  EXPECT_EQ(meta["format_version"], kArchiveFormatVersion);
  EXPECT_EQ(meta["probe_kind"], "lse");
  EXPECT_EQ(meta["layer_depths"], (std::vector<int>{6, 6, 8}));
  EXPECT_EQ(meta["blobs"].size(), 3u);
  EXPECT_EQ(entries[1].name, "layer_0.f32");
  EXPECT_EQ(entries[1].data.size(), 3u * 6u * 4u);
}

TEST(ProbeArchive, LittleEndianFloat32Blobs) {
  ProbeWeights w = ProbeWeights::zeros(2, {2});
  w.layers[0](0, 0) = 1.0;  // 0x3f800000
  const auto entries = read_tar(encode_probe(w, {}));
  const std::string& blob = entries[1].data;
  EXPECT_EQ(static_cast<unsigned char>(blob[0]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(blob[1]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(blob[2]), 0x80);
  EXPECT_EQ(static_cast<unsigned char>(blob[3]), 0x3f);
}

TEST(ProbeArchive, VersionMismatchRejected) {
  const SyntheticGenerator gen(testutil::small_config());
  Archive a = decode_archive(encode_probe(random_probe(3, 3, gen.layer_depths()), archive_info_for(gen)));
  // Rewrite the stored version by hand.
  auto entries = read_tar(encode_archive(a));
  auto meta = nlohmann::json::parse(entries.front().data);
  meta["format_version"] = kArchiveFormatVersion + 1;
  entries.front().data = meta.dump();
  EXPECT_THROW(decode_probe(write_tar(entries)), ArchiveVersionError);
  meta.erase("format_version");
  entries.front().data = meta.dump();
  EXPECT_THROW(decode_probe(write_tar(entries)), ArchiveFormatError);
}

TEST(ProbeArchive, DepthAndResolutionMismatch) {
  const SyntheticGenerator gen(GeneratorConfig{});
  const SyntheticGenerator small(testutil::small_config());
  const fs::path p = temp_path("mismatch.tar");
  save_probe(p.string(), random_probe(4, 3, small.layer_depths()), archive_info_for(small));
  EXPECT_THROW(load_probe(p.string(), gen), ArchiveMismatchError);
  EXPECT_NO_THROW(load_probe(p.string(), small));

  GeneratorConfig c = testutil::small_config();
  c.layer_resolutions = {2, 4, 8};
  const SyntheticGenerator other_res(c);
  EXPECT_THROW(load_probe(p.string(), other_res), ArchiveMismatchError);
  fs::remove(p);
}

TEST(ProbeArchive, MalformedInputs) {
  EXPECT_THROW(load_probe("/nonexistent/probe.tar"), std::runtime_error);
  EXPECT_THROW(decode_probe(write_tar({{"metadata.json", "{not json"}})), ArchiveFormatError);
  EXPECT_THROW(decode_probe(write_tar({{"other.txt", "x"}})), ArchiveFormatError);
  const SyntheticGenerator gen(testutil::small_config());
  auto entries = read_tar(encode_probe(random_probe(5, 3, gen.layer_depths()), {}));
  entries[1].data.pop_back();
  EXPECT_THROW(decode_probe(write_tar(entries)), ArchiveFormatError);
  entries.pop_back();
  EXPECT_THROW(decode_probe(write_tar(entries)), ArchiveFormatError);
}

TEST(NseArchive, RoundTrip) {
  const GeneratorConfig c = testutil::small_config();
  const SyntheticGenerator gen(c);
  for (NseVariant v : {NseVariant::kNse1, NseVariant::kNse2}) {
    NseWeights w = NseWeights::initialized(v, 3, gen.layers(), 5, 4);
    for (Conv3x3& conv : w.convs)
      for (std::size_t i = 0; i < conv.bias.size(); ++i) conv.bias[i] = 0.01 * (i + 1);
    w.round_to_float();
    const LoadedNse back = decode_nse(encode_nse(w, archive_info_for(gen)));
    EXPECT_EQ(back.weights.variant, v);
    EXPECT_EQ(back.weights.hidden, 4);
    ASSERT_EQ(back.weights.convs.size(), w.convs.size());
    for (std::size_t i = 0; i < w.convs.size(); ++i) {
      EXPECT_EQ(back.weights.convs[i].weight, w.convs[i].weight);
      EXPECT_EQ(back.weights.convs[i].bias, w.convs[i].bias);
    }
    EXPECT_THROW(decode_probe(encode_nse(w, archive_info_for(gen))), ArchiveFormatError);
  }
  EXPECT_THROW(decode_nse(encode_probe(random_probe(6, 3, gen.layer_depths()), {})), ArchiveFormatError);
}

TEST(MatrixArchive, RoundTrip) {
  Matrix m(2, 3);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = 0.25 * static_cast<double>(i) - 0.5;
  const std::string bytes = encode_matrices("centers", {"a", "b"}, {{"centers", m}}, {});
  EXPECT_EQ(decode_matrix(bytes, "centers"), m);
  EXPECT_THROW(decode_matrix(bytes, "missing"), ArchiveFormatError);
}

// ---------------------------------------------------------------------------
// Wire formats

TEST(Base64, Rfc4648Vectors) {
  const std::pair<const char*, const char*> v[] = {{"", ""},         {"f", "Zg=="},         {"fo", "Zm8="},
                                                   {"foo", "Zm9v"},  {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
                                                   {"foobar", "Zm9vYmFy"}};
  for (auto [plain, enc] : v) {
    EXPECT_EQ(base64_encode(plain), enc);
    EXPECT_EQ(base64_decode(enc), plain);
  }
  std::string all;
  for (int i = 0; i < 256; ++i) all += static_cast<char>(i);
  EXPECT_EQ(base64_decode(base64_encode(all)), all);
  EXPECT_THROW(base64_decode("Zm9"), WireFormatError);
  EXPECT_THROW(base64_decode("Zm9*"), WireFormatError);
}

TEST(Pgm, LosslessMaskRoundTrip) {
  std::mt19937_64 rng(7);
  const SemanticMask m = testutil::random_mask(rng, 5, 7, 5);
  const std::string s = encode_pgm(m);
  EXPECT_EQ(s.substr(0, 11), "P5\n7 5\n255\n");
  EXPECT_EQ(decode_pgm(s), m);
  EXPECT_EQ(decode_pgm(base64_decode(base64_encode(s))), m);
  // Header comments are allowed.
  const std::string commented = "P5\n# painted\n7 5\n255\n" + s.substr(11);
  EXPECT_EQ(decode_pgm(commented), m);
}

TEST(Pgm, Errors) {
  EXPECT_THROW(decode_pgm("P6\n1 1\n255\n\1\1\1"), WireFormatError);
  EXPECT_THROW(decode_pgm("P5\n2 2\n255\n\1"), WireFormatError);
  EXPECT_THROW(decode_pgm("P5\n2 2\n65535\n\1\1\1\1"), WireFormatError);
  EXPECT_THROW(decode_pgm("P5\nx 2\n255\n"), WireFormatError);
  SemanticMask big(1, 1, 300);
  EXPECT_THROW(encode_pgm(big), WireFormatError);
}

TEST(Ppm, RoundTripWithinQuantization) {
  std::mt19937_64 rng(8);
  Tensor3 img(3, 4, 6);
  std::uniform_real_distribution<double> u(-0.2, 1.2);
  for (double& v : img.data()) v = u(rng);
  const Tensor3 back = decode_ppm(encode_ppm(img));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 6; ++x) EXPECT_NEAR(back(c, y, x), std::clamp(img(c, y, x), 0.0, 1.0), 0.5 / 255.0 + 1e-12);
  // Already-quantized images are fixed points.
  EXPECT_EQ(decode_ppm(encode_ppm(back)), back);
  EXPECT_THROW(encode_ppm(Tensor3(1, 2, 2)), WireFormatError);
  EXPECT_THROW(decode_ppm(encode_pgm(SemanticMask(2, 2))), WireFormatError);
}

TEST(Wire, BinaryRegionFromMask) {
  SemanticMask m(2, 2, 0);
  m.labels[1] = 3;
  m.labels[2] = 1;
  const BinaryMask b = to_binary(m);
  EXPECT_EQ(b.count(), 2u);
  EXPECT_TRUE(b.at(0, 1));
  EXPECT_FALSE(b.at(1, 1));
}
