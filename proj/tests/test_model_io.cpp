#include <doctest.h>

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "support.hpp"
#include "uaom/model_io.hpp"

using namespace uaom;
using nlohmann::json;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t header_length(const std::vector<char>& b) {
  std::uint64_t n;
  std::memcpy(&n, b.data() + 8, 8);
  return n;
}

json header_of(const std::vector<char>& b) {
  return json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(header_length(b)));
}

// Replaces the JSON header and re-pads, keeping everything after it.
std::vector<char> with_header(const std::vector<char>& b, const json& h) {
  const std::size_t old_end = 16 + header_length(b);
  const std::size_t old_payload = (old_end + 3) / 4 * 4;
  const std::string text = h.dump();
  const std::uint64_t n = text.size();
  std::vector<char> out(16 + text.size());
  std::memcpy(out.data(), b.data(), 8);
  std::memcpy(out.data() + 8, &n, 8);
  std::memcpy(out.data() + 16, text.data(), text.size());
  while (out.size() % 4) out.push_back('\0');
  out.insert(out.end(), b.begin() + static_cast<std::ptrdiff_t>(old_payload), b.end());
  return out;
}

ModelErrorCode load_error(const std::filesystem::path& p) {
  try {
    load_model(p);
  } catch (const ModelFormatError& e) {
    return e.code();
  }
  FAIL("container loaded although it is corrupt");
  return ModelErrorCode::kIo;
}

}  // namespace

TEST_CASE("fixture containers load and pass their reference self-check") {
  const LoadedModel bb = load_model_with_references(testing::fixture("backbone.uaom"));
  CHECK(bb.model.kind == "backbone");
  CHECK(bb.model.tap_names.size() == 5);
  CHECK(bb.references.size() == 2);
  for (const ReferenceCase& r : bb.references) CHECK(reference_deviation(bb.model, r) <= 1e-4);

  const LoadedModel desc = load_model_with_references(testing::fixture("descriptor.uaom"));
  CHECK(desc.model.l2_normalize_output);
  CHECK(desc.model.output_channels() == 128);
}

TEST_CASE("tiny fixture forward equals its recorded output") {
  const LoadedModel m = load_model_with_references(testing::fixture("tiny.uaom"));
  REQUIRE(m.references.size() == 1);
  const Tensor out = m.model.forward(m.references[0].image);
  REQUIRE(m.references[0].output.has_value());
  const Tensor& want = *m.references[0].output;
  REQUIRE(out.same_shape(want));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-5));
}

TEST_CASE("write then read is bit exact") {
  testing::TempDir dir("modelio");
  const LoadedModel m = load_model_with_references(testing::fixture("backbone.uaom"));
  write_model(dir / "copy.uaom", m.model, m.references);
  const LoadedModel back = load_model_with_references(dir / "copy.uaom");
  REQUIRE(back.model.layers.size() == m.model.layers.size());
  for (std::size_t i = 0; i < m.model.layers.size(); ++i) {
    const auto& a = m.model.layers[i].conv;
    const auto& b = back.model.layers[i].conv;
    CHECK(a.weights == b.weights);
    CHECK(a.bias == b.bias);
    CHECK(a.stride == b.stride);
    CHECK(a.padding == b.padding);
  }
  CHECK(back.model.tap_names == m.model.tap_names);
  CHECK(back.model.input_spec.mean == m.model.input_spec.mean);
  CHECK(back.references.size() == m.references.size());
  // Payload bytes survive unchanged.
  write_model(dir / "copy2.uaom", back.model, back.references);
  CHECK(slurp(dir / "copy.uaom") == slurp(dir / "copy2.uaom"));
}

TEST_CASE("corrupt containers fail with a specific error code") {
  testing::TempDir dir("corrupt");
  const auto good = slurp(testing::fixture("tiny.uaom"));

  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    dump(dir / "m.uaom", b);
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kBadMagic);
  }
  SUBCASE("unsupported version") {
    auto b = good;
    b[4] = 9;
    dump(dir / "m.uaom", b);
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kUnsupportedVersion);
  }
  SUBCASE("truncated payload") {
    auto b = good;
    const std::size_t payload = (16 + header_length(b) + 3) / 4 * 4;
    b.resize(payload + 8);
    dump(dir / "m.uaom", b);
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kShapeMismatch);
  }
  SUBCASE("header is not JSON") {
    auto b = good;
    b[16] = '#';
    dump(dir / "m.uaom", b);
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kBadHeader);
  }
  SUBCASE("tap naming an unknown layer") {
    json h = header_of(good);
    h["taps"] = {"conv_missing"};
    dump(dir / "m.uaom", with_header(good, h));
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kMissingTap);
  }
  SUBCASE("unknown dtype") {
    json h = header_of(good);
    h["tensors"][0]["dtype"] = "f16";
    dump(dir / "m.uaom", with_header(good, h));
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kUnknownDtype);
  }
  SUBCASE("layer shape disagreeing with its tensor") {
    json h = header_of(good);
    h["layers"][0]["shape"][0] = 3;
    dump(dir / "m.uaom", with_header(good, h));
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kShapeMismatch);
  }
  SUBCASE("reference activations that disagree with the weights") {
    auto b = good;
    // conv_b.bias follows 18 + 2 + 4 floats; conv_b has no ReLU.
    const std::size_t at = (16 + header_length(b) + 3) / 4 * 4 + 24 * 4;
    float w;
    std::memcpy(&w, b.data() + at, 4);
    w += 0.5f;
    std::memcpy(b.data() + at, &w, 4);
    dump(dir / "m.uaom", b);
    CHECK(load_error(dir / "m.uaom") == ModelErrorCode::kReferenceMismatch);
    LoadOptions lax;
    lax.verify_references = false;
    CHECK_NOTHROW(load_model(dir / "m.uaom", lax));
  }
  SUBCASE("missing file") {
    CHECK(load_error(dir / "absent.uaom") == ModelErrorCode::kIo);
  }
}

TEST_CASE("pyramid levels halve and carry the tapped channel counts") {
  const NetworkModel m = load_model(testing::fixture("backbone.uaom"));
  const Tensor img = testing::random_tensor(70, 50, 3, 4, 0.0f, 1.0f);
  const FeaturePyramid p = extract_pyramid(m, img);
  const int channels[] = {20, 16, 32, 32, 32};
  int h = 70, w = 50;
  for (int l = 1; l <= kPyramidLevels; ++l) {
    CHECK(p.level(l).height() == h);
    CHECK(p.level(l).width() == w);
    CHECK(p.level(l).channels() == channels[l - 1]);
    h /= 2;
    w /= 2;
  }
  CHECK_THROWS_AS(extract_pyramid(m, testing::random_tensor(20, 50, 3, 1)), std::invalid_argument);
}

TEST_CASE("segments compose into the full pyramid") {
  const NetworkModel m = load_model(testing::fixture("backbone.uaom"));
  const FeaturePyramid p = extract_pyramid(m, testing::random_tensor(48, 64, 3, 5, 0.0f, 1.0f));
  for (int l = 1; l < kPyramidLevels; ++l) {
    const Tensor next = forward_segment(m, p.level(l), l, l + 1);
    REQUIRE(next.same_shape(p.level(l + 1)));
    for (std::size_t i = 0; i < next.size(); ++i)
      CHECK(next.data()[i] == doctest::Approx(p.level(l + 1).data()[i]).epsilon(1e-5));
  }
  CHECK_THROWS(forward_segment(m, p.level(1), 1, 3));
}

TEST_CASE("input preparation replicates gray and standardises") {
  const NetworkModel m = load_model(testing::fixture("backbone.uaom"));
  Tensor g(2, 2, 1, 0.75f);
  const Tensor x = m.prepare_input(g);
  REQUIRE(x.channels() == 3);
  for (float v : x.data()) CHECK(v == doctest::Approx((0.75 - 0.5) / 0.25));
}
