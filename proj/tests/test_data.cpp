#include <doctest.h>

#include "r2d2/data.hpp"
#include "support/filter_cases.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <sstream>

using namespace r2d2;
using namespace r2d2::testing;

namespace {

// Inverse renderer: reads colors off lit pixels and tells shapes apart by
// a few probe points inside the lit bounding box of each quadrant.
Latent decode_image(const ImageInput& im) {
  Latent out;
  const int half = im.width / 2;
  for (int q = 0; q < kNumQuadrants; ++q) {
    const int y0 = (q / 2) * half, x0 = (q % 2) * half;
    int top = half, bottom = -1, left = half, right = -1;
    double rgb[3] = {0, 0, 0};
    auto lit = [&](int y, int x) {
      return im.at(0, y0 + y, x0 + x) + im.at(1, y0 + y, x0 + x) + im.at(2, y0 + y, x0 + x) > 0.0;
    };
    for (int y = 0; y < half; ++y) {
      for (int x = 0; x < half; ++x) {
        if (!lit(y, x)) continue;
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
        for (int c = 0; c < 3; ++c) rgb[c] = im.at(c, y0 + y, x0 + x);
      }
    }
    if (bottom < 0) continue;
    Object obj;
    if (rgb[0] == 1 && rgb[1] == 1) obj.color = Color::yellow;
    else if (rgb[0] == 1) obj.color = Color::red;
    else if (rgb[1] == 1) obj.color = Color::green;
    else obj.color = Color::blue;

    auto row_full = [&](int y) {
      for (int x = left; x <= right; ++x) if (!lit(y, x)) return false;
      return true;
    };
    bool full = true;
    for (int y = top; y <= bottom; ++y) full = full && row_full(y);
    const int w = right - left + 1, h = bottom - top + 1;
    if (full) obj.shape = Shape::square;
    else if (row_full(bottom) && !row_full(top)) obj.shape = Shape::triangle;
    else if (lit(top + h / 4, left + w / 4)) obj.shape = Shape::circle;
    else obj.shape = Shape::cross;
    out.cells[static_cast<size_t>(q)] = obj;
  }
  return out;
}

int quadrant_of(const std::string& v, const std::string& h) {
  return (v == "bottom" ? 2 : 0) + (h == "right" ? 1 : 0);
}

Object object_of(const std::string& c, const std::string& s) {
  static const std::map<std::string, Color> colors{
      {"red", Color::red}, {"green", Color::green}, {"blue", Color::blue}, {"yellow", Color::yellow}};
  static const std::map<std::string, Shape> shapes{
      {"square", Shape::square}, {"circle", Shape::circle}, {"triangle", Shape::triangle}, {"cross", Shape::cross}};
  return {colors.at(c), shapes.at(s)};
}

// Text parser for the title and content templates.
Latent parse_text(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> w;
  for (std::string s; in >> s;) w.push_back(s);
  Latent out;
  size_t i = 2;  // "photo of" / "image shows"
  const bool content = w[0] == "image";
  while (i < w.size()) {
    if (w[i] == "and") ++i;
    if (content) {
      // a C S in the V H corner
      out.cells[static_cast<size_t>(quadrant_of(w[i + 5], w[i + 6]))] = object_of(w[i + 1], w[i + 2]);
      i += 8;
    } else {
      out.cells[static_cast<size_t>(quadrant_of(w[i + 2], w[i + 3]))] = object_of(w[i], w[i + 1]);
      i += 4;
    }
  }
  return out;
}

bool same_records(const std::vector<RawRecord>& a, const std::vector<RawRecord>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto &x = a[i], &y = b[i];
    if (x.id != y.id || !(x.latent == y.latent) || !(x.text_latent == y.text_latent) ||
        x.image.pixels != y.image.pixels || x.declared_width != y.declared_width ||
        x.declared_height != y.declared_height || x.ctr != y.ctr || x.is_match != y.is_match ||
        x.usable != y.usable || x.split != y.split) {
      return false;
    }
    for (size_t f = 0; f < 3; ++f) {
      if (x.fields[f].ids != y.fields[f].ids) return false;
    }
  }
  return true;
}

double match_rate(const std::vector<RawRecord>& r) {
  double m = 0;
  for (const auto& x : r) m += x.is_match ? 1 : 0;
  return m / static_cast<double>(r.size());
}

}  // namespace

TEST_CASE("latent codes round-trip and the pool has one- and two-object layouts") {
  const auto pool = all_latents();
  // 4·16 single objects + 6·16² pairs
  CHECK(pool.size() == 64 + 6 * 256);
  std::set<int64_t> codes;
  for (const auto& l : pool) {
    CHECK(Latent::from_code(l.code()) == l);
    codes.insert(l.code());
  }
  CHECK(codes.size() == pool.size());
  CHECK_THROWS(Latent::from_code(-1));
  CHECK_THROWS(Latent::from_code(17LL * 17 * 17 * 17));
}

TEST_CASE("generation is deterministic under the seed") {
  GeneratorOptions opt;
  opt.bad_dimension_rate = 0.2;
  opt.short_query_rate = 0.2;
  opt.sensitive_rate = 0.1;
  const auto a = generate_pairs(200, 0.2, 42, opt);
  const auto b = generate_pairs(200, 0.2, 42, opt);
  CHECK(same_records(a, b));
  CHECK_FALSE(same_records(a, generate_pairs(200, 0.2, 43, opt)));
  CHECK_THROWS_AS(generate_pairs(0, 0.0, 1), std::invalid_argument);
}

TEST_CASE("noise injection") {
  const auto clean = generate_pairs(300, 0.0, 3);
  for (const auto& r : clean) {
    CHECK(r.is_match);
    CHECK(r.text_latent == r.latent);
  }
  const auto noisy = generate_pairs(300, 0.2, 3);
  int mismatched = 0;
  double ctr_match = 0, ctr_noise = 0;
  for (const auto& r : noisy) {
    CHECK(r.is_match == (r.text_latent == r.latent));
    mismatched += r.is_match ? 0 : 1;
    (r.is_match ? ctr_match : ctr_noise) += r.ctr;
    CHECK(r.ctr >= 0.0);
    CHECK(r.ctr <= 1.0);
  }
  CHECK(mismatched == 60);
  CHECK(ctr_noise / 60 < ctr_match / 240);
  // a single noisy record still gets foreign texts
  const auto one = generate_pairs(10, 0.1, 5);
  CHECK(std::count_if(one.begin(), one.end(), [](const RawRecord& r) { return !r.is_match; }) == 1);
}

TEST_CASE("latents are drawn without replacement while the pool lasts") {
  const auto recs = generate_pairs(1000, 0.0, 9);
  std::set<int64_t> codes;
  for (const auto& r : recs) codes.insert(r.latent.code());
  CHECK(codes.size() == 1000);
}

TEST_CASE("an independent decoder recovers the latent from image and text") {
  for (int res : {16, 32}) {
    for (const auto& l : all_latents()) {
      CHECK(decode_image(render_image(l, res)) == l);
    }
  }
  const auto recs = generate_pairs(400, 0.0, 11);
  for (const auto& r : recs) {
    CHECK(decode_image(r.image) == r.latent);
    CHECK(parse_text(vocab::decode(r.field(TextField::title))) == r.latent);
    CHECK(parse_text(vocab::decode(r.field(TextField::content))) == r.latent);
    // queries name the objects in reading order without positions
    std::vector<std::string> expect;
    for (const auto& c : r.latent.cells) {
      if (c) {
        expect.push_back(vocab::word(vocab::color_id(c->color)));
        expect.push_back(vocab::word(vocab::shape_id(c->shape)));
      }
    }
    std::istringstream in(vocab::decode(r.field(TextField::query)));
    std::vector<std::string> got;
    for (std::string s; in >> s;) got.push_back(s);
    CHECK(got == expect);
  }
}

TEST_CASE("field lengths keep the title < content, query shortest ordering") {
  const auto recs = generate_pairs(1600, 0.0, 2);
  double len[3] = {0, 0, 0};
  for (const auto& r : recs) {
    for (int f = 0; f < 3; ++f) len[f] += r.fields[static_cast<size_t>(f)].word_count();
  }
  CHECK(len[2] < len[0]);
  CHECK(len[0] < len[1]);
  // target averages 18 / 29 / 5 words
  CHECK(len[1] / len[0] == doctest::Approx(29.0 / 18.0).epsilon(0.1));
  for (const auto& r : recs) {
    for (const auto& f : r.fields) CHECK(static_cast<int>(f.size()) <= ModelConfig{}.max_text_len);
  }
}

TEST_CASE("text fields are sampled uniformly") {
  const auto rec = generate_pairs(1, 0.0, 1).front();
  std::mt19937_64 rng(123);
  int counts[3] = {0, 0, 0};
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) {
    const TokenSequence& t = sample_text_field(rec, rng);
    for (int f = 0; f < 3; ++f) counts[f] += &t == &rec.fields[static_cast<size_t>(f)] ? 1 : 0;
  }
  for (int c : counts) CHECK(std::abs(c / double(draws) - 1.0 / 3.0) <= 0.02);

  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(&sample_text_field(rec, a) == &sample_text_field(rec, b));

  for (int i = 0; i < 200; ++i) CHECK(&sample_text_field(rec, rng, FieldMode::title_only) == &rec.fields[0]);
  for (int i = 0; i < 200; ++i) CHECK(&sample_text_field(rec, rng, FieldMode::no_query) != &rec.fields[2]);

  RawRecord none = rec;
  none.usable = {false, false, false};
  CHECK_THROWS_AS(sample_text_field(none, rng), std::invalid_argument);
  RawRecord only_query = rec;
  only_query.usable = {true, true, true};
  only_query.usable[0] = false;
  CHECK_THROWS_AS(sample_text_field(only_query, rng, FieldMode::title_only), std::invalid_argument);
}

TEST_CASE("filter boundary suite") {
  const auto cases = filter_boundary_cases();
  CHECK(cases.size() == 50);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const FilterResult r = apply_filters(c.record);
    CHECK(r.keep == c.keep);
    CHECK(r.reason == c.reason);
    CHECK(r.field_ok == c.field_ok);
  }
}

TEST_CASE("a filtered-out field is never sampled") {
  RawRecord r = base_record();
  r.fields[0] = words_of_length(1);
  auto kept = filter_records({r});
  REQUIRE(kept.size() == 1);
  CHECK_FALSE(kept[0].usable[0]);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 3000; ++i) CHECK(&sample_text_field(kept[0], rng) != &kept[0].fields[0]);
}

TEST_CASE("filtering is idempotent and the predicate is pluggable") {
  GeneratorOptions opt;
  opt.bad_dimension_rate = 0.3;
  opt.short_query_rate = 0.3;
  opt.sensitive_rate = 0.3;
  const auto raw = generate_pairs(500, 0.1, 4, opt);
  const auto once = filter_records(raw);
  const auto twice = filter_records(once);
  CHECK(same_records(once, twice));
  CHECK(once.size() < raw.size());
  for (const auto& r : once) {
    CHECK(apply_filters(r).keep);
    CHECK_FALSE((r.usable[2] && r.fields[2].word_count() < 2));
    CHECK_FALSE((r.usable[1] && FilterRule::blocklisted(r.fields[1])));
  }

  FilterRule strict;
  strict.sensitive = [](const TokenSequence& t) {
    return std::find(t.ids.begin(), t.ids.end(), vocab::color_id(Color::red)) != t.ids.end();
  };
  for (const auto& r : filter_records(raw, strict)) {
    for (size_t f = 0; f < 3; ++f) {
      if (r.usable[f]) CHECK_FALSE(strict.sensitive(r.fields[f]));
    }
  }
}

TEST_CASE("ctr rank selection") {
  std::vector<RawRecord> recs(4);
  const double ctrs[] = {0.9, 0.1, 0.5, 0.7};
  for (int i = 0; i < 4; ++i) {
    recs[static_cast<size_t>(i)].id = i;
    recs[static_cast<size_t>(i)].ctr = ctrs[i];
  }
  const auto half = ctr_rank_select(recs, 0.5);
  REQUIRE(half.size() == 2);
  CHECK(half[0].id == 0);
  CHECK(half[1].id == 3);

  const auto all = ctr_rank_select(recs, 1.0);
  REQUIRE(all.size() == 4);
  CHECK(all[0].ctr == 0.9);
  CHECK(all[1].ctr == 0.7);
  CHECK(all[2].ctr == 0.5);
  CHECK(all[3].ctr == 0.1);

  CHECK(ctr_select_count(10, 0.25) == 3);
  CHECK(ctr_select_count(30, 0.1) == 3);
  CHECK(ctr_select_count(7, 1e-6) == 1);
  CHECK(ctr_select_count(5000, 0.05) == 250);
  CHECK_THROWS_AS(ctr_select_count(10, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ctr_select_count(10, 1.5), std::invalid_argument);

  // ties keep input order
  std::vector<RawRecord> tied(3);
  for (int i = 0; i < 3; ++i) {
    tied[static_cast<size_t>(i)].id = i;
    tied[static_cast<size_t>(i)].ctr = 0.5;
  }
  const auto t = ctr_rank_select(tied, 0.5);
  REQUIRE(t.size() == 2);
  CHECK(t[0].id == 0);
  CHECK(t[1].id == 1);
}

TEST_CASE("ctr selection keeps the top and raises the match rate") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const auto recs = generate_pairs(400, 0.3, seed);
    for (double frac : {0.05, 0.3, 0.5, 0.77}) {
      const auto sel = ctr_rank_select(recs, frac);
      CHECK(sel.size() == static_cast<size_t>(std::ceil(frac * 400 - 1e-9)));
      std::set<int64_t> ids;
      double min_sel = 1.0;
      for (const auto& r : sel) {
        ids.insert(r.id);
        min_sel = std::min(min_sel, r.ctr);
      }
      CHECK(ids.size() == sel.size());
      double max_rej = 0.0;
      for (const auto& r : recs) {
        if (!ids.count(r.id)) max_rej = std::max(max_rej, r.ctr);
      }
      CHECK(min_sel >= max_rej);
      CHECK(match_rate(sel) > match_rate(recs));
    }
  }
}

TEST_CASE("leakage check") {
  const auto pre = generate_pairs(300, 0.0, 21);
  const auto down = generate_pairs(50, 0.0, 22);
  // both sets come from separate shuffles of the same pool, so drop natural overlaps first
  const auto base = leakage_check(pre, down, true);
  auto clean = base.cleaned;
  CHECK(leakage_check(clean, down).hits.empty());

  auto planted = clean;
  planted.push_back(down[7]);
  const auto rep = leakage_check(planted, down, true);
  REQUIRE(rep.hits.size() == 1);
  CHECK(rep.hits[0].pretrain_index == planted.size() - 1);
  CHECK(rep.hits[0].downstream_index == 7);
  CHECK(rep.cleaned.size() == clean.size());

  // every planted copy is found
  auto many = clean;
  for (size_t j = 0; j < down.size(); j += 3) many.insert(many.begin() + static_cast<std::ptrdiff_t>(j), down[j]);
  CHECK(leakage_check(many, down).hits.size() == (down.size() + 2) / 3);
}

TEST_CASE("image hash equality matches pixel equality") {
  auto recs = generate_pairs(900, 0.0, 31, GeneratorOptions{16});
  // plant exact copies so both sides of the equivalence occur
  for (size_t i = 0; i < 60; ++i) recs[900 - 1 - i].image = recs[i * 7].image;
  std::vector<uint64_t> h;
  for (const auto& r : recs) h.push_back(image_hash(r.image));
  size_t equal_pairs = 0;
  for (size_t i = 0; i < recs.size(); ++i) {
    for (size_t j = i + 1; j < recs.size(); ++j) {
      const bool same = recs[i].image.pixels == recs[j].image.pixels;
      equal_pairs += same ? 1 : 0;
      if ((h[i] == h[j]) != same) FAIL("hash and pixel equality disagree at ", i, ", ", j);
    }
  }
  CHECK(equal_pairs >= 60);
}

TEST_CASE("splits are 8:1:1") {
  for (int n : {10, 11, 37, 100, 576, 1001}) {
    auto recs = generate_pairs(n, 0.0, 1, GeneratorOptions{8});
    assign_splits(recs, 3);
    const double tr = static_cast<double>(select_split(recs, Split::train).size());
    const double va = static_cast<double>(select_split(recs, Split::val).size());
    const double te = static_cast<double>(select_split(recs, Split::test).size());
    CHECK(tr + va + te == n);
    CHECK(std::abs(tr - 0.8 * n) <= 1.0);
    CHECK(std::abs(va - 0.1 * n) <= 1.0);
    CHECK(std::abs(te - 0.1 * n) <= 1.0);
  }
}

TEST_CASE("dataset directory round trip") {
  GeneratorOptions opt;
  opt.short_query_rate = 0.2;
  auto recs = filter_records(generate_pairs(40, 0.25, 6, opt));
  assign_splits(recs, 2);
  const auto dir = std::filesystem::temp_directory_path() / "r2d2_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  write_dataset(dir.string(), recs, ModelConfig{}.max_text_len);
  const auto back = read_dataset(dir.string());
  CHECK(same_records(recs, back));
  const auto bytes = std::filesystem::file_size(dir / "tokens.bin");
  CHECK(bytes == recs.size() * 3 * static_cast<size_t>(ModelConfig{}.max_text_len) * 4);
  CHECK_THROWS(write_dataset(dir.string(), recs, 4));
  std::filesystem::remove_all(dir);
  CHECK_THROWS(read_dataset(dir.string()));
}
