#include "r2d2/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <unordered_map>

namespace r2d2 {

namespace {

const std::vector<std::string>& words() {
  static const std::vector<std::string> w{
      "[PAD]", "[CLS]",  "[MASK]", "red",   "green", "blue", "yellow", "square", "circle",
      "triangle", "cross", "top", "bottom", "left", "right", "photo", "of", "and",
      "image", "shows", "a", "in", "the", "corner", vocab::kBlockedWord};
  return w;
}

constexpr int kCellBase = 1 + kNumColors * kNumShapes;  // 17

std::mt19937_64 record_rng(uint64_t seed, uint64_t index, uint64_t salt) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index),
                    static_cast<uint32_t>(index >> 32), static_cast<uint32_t>(salt)};
  return std::mt19937_64(seq);
}

const char* vertical(int q) { return q < 2 ? "top" : "bottom"; }
const char* horizontal(int q) { return q % 2 == 0 ? "left" : "right"; }

bool in_shape(Shape s, double x, double y, double side) {
  const double c = (side - 1.0) / 2.0;
  switch (s) {
    case Shape::square:
      return true;
    case Shape::circle:
      return (x - c) * (x - c) + (y - c) * (y - c) <= (side / 2.0) * (side / 2.0);
    case Shape::triangle:
      return std::abs(x - c) <= (y + 1.0) / side * (side / 2.0);
    case Shape::cross:
      return std::abs(x - c) <= side / 6.0 || std::abs(y - c) <= side / 6.0;
  }
  return false;
}

std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::red:
      return {1, 0, 0};
    case Color::green:
      return {0, 1, 0};
    case Color::blue:
      return {0, 0, 1};
    case Color::yellow:
      return {1, 1, 0};
  }
  return {0, 0, 0};
}

void put_i32(std::ostream& os, int32_t v) {
  const auto u = static_cast<uint32_t>(v);
  const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                     static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
  os.write(b, 4);
}

int32_t get_i32(const unsigned char* b) {
  const uint32_t u = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  return static_cast<int32_t>(u);
}

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int Latent::object_count() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
}

int64_t Latent::code() const {
  int64_t code = 0;
  for (int q = kNumQuadrants - 1; q >= 0; --q) {
    const auto& c = cells[static_cast<size_t>(q)];
    const int digit = c ? 1 + static_cast<int>(c->color) * kNumShapes + static_cast<int>(c->shape) : 0;
    code = code * kCellBase + digit;
  }
  return code;
}

Latent Latent::from_code(int64_t code) {
  if (code < 0) throw std::invalid_argument("Latent::from_code: negative code");
  Latent l;
  for (int q = 0; q < kNumQuadrants; ++q) {
    const int digit = static_cast<int>(code % kCellBase);
    code /= kCellBase;
    if (digit > 0) {
      l.cells[static_cast<size_t>(q)] =
          Object{static_cast<Color>((digit - 1) / kNumShapes), static_cast<Shape>((digit - 1) % kNumShapes)};
    }
  }
  if (code != 0) throw std::invalid_argument("Latent::from_code: code out of range");
  return l;
}

std::vector<Latent> all_latents() {
  std::vector<Latent> out;
  int64_t limit = 1;
  for (int q = 0; q < kNumQuadrants; ++q) limit *= kCellBase;
  for (int64_t code = 0; code < limit; ++code) {
    Latent l = Latent::from_code(code);
    const int n = l.object_count();
    if (n == 1 || n == 2) out.push_back(l);
  }
  return out;
}

namespace vocab {

std::string word(int32_t id) {
  if (id < 0 || id >= size()) throw std::out_of_range("vocab::word: id " + std::to_string(id));
  return words()[static_cast<size_t>(id)];
}

int32_t id(const std::string& w) {
  const auto& ws = words();
  auto it = std::find(ws.begin(), ws.end(), w);
  if (it == ws.end()) throw std::out_of_range("vocab::id: unknown word '" + w + "'");
  return static_cast<int32_t>(it - ws.begin());
}

int32_t size() { return static_cast<int32_t>(words().size()); }
int32_t color_id(Color c) { return 3 + static_cast<int32_t>(c); }
int32_t shape_id(Shape s) { return 7 + static_cast<int32_t>(s); }

std::string decode(const TokenSequence& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (!tokens.attention_mask[i] || tokens.ids[i] == kClsId) continue;
    if (!out.empty()) out += ' ';
    out += word(tokens.ids[i]);
  }
  return out;
}

TokenSequence encode(const std::string& text) {
  std::vector<int32_t> ids{kClsId};
  std::istringstream is(text);
  std::string w;
  while (is >> w) ids.push_back(id(w));
  return TokenSequence::from_ids(ids);
}

}  // namespace vocab

std::string to_string(TextField f) {
  switch (f) {
    case TextField::title:
      return "title";
    case TextField::content:
      return "content";
    case TextField::query:
      return "query";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

TokenSequence render_text(const Latent& latent, TextField field) {
  std::vector<std::string> parts;
  for (int q = 0; q < kNumQuadrants; ++q) {
    const auto& cell = latent.cells[static_cast<size_t>(q)];
    if (!cell) continue;
    const std::string c = vocab::word(vocab::color_id(cell->color));
    const std::string s = vocab::word(vocab::shape_id(cell->shape));
    switch (field) {
      case TextField::title:
        parts.push_back(c + " " + s + " " + vertical(q) + " " + horizontal(q));
        break;
      case TextField::content:
        parts.push_back("a " + c + " " + s + " in the " + vertical(q) + " " + horizontal(q) + " corner");
        break;
      case TextField::query:
        parts.push_back(c + " " + s);
        break;
    }
  }
  if (parts.empty()) throw std::invalid_argument("render_text: empty latent");
  std::string text = field == TextField::title ? "photo of " : field == TextField::content ? "image shows " : "";
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) text += field == TextField::query ? " " : " and ";
    text += parts[i];
  }
  return vocab::encode(text);
}

ImageInput render_image(const Latent& latent, int resolution) {
  if (resolution < 8 || resolution % 2) throw std::invalid_argument("render_image: resolution must be even and ≥ 8");
  ImageInput im;
  im.channels = 3;
  im.height = im.width = resolution;
  im.pixels.assign(static_cast<size_t>(3 * resolution * resolution), 0.0);
  const int half = resolution / 2;
  const int margin = std::max(1, half / 8);
  const int side = half - 2 * margin;
  for (int q = 0; q < kNumQuadrants; ++q) {
    const auto& cell = latent.cells[static_cast<size_t>(q)];
    if (!cell) continue;
    const int y0 = (q / 2) * half + margin, x0 = (q % 2) * half + margin;
    const auto color = rgb(cell->color);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        if (!in_shape(cell->shape, x, y, side)) continue;
        for (int ch = 0; ch < 3; ++ch) {
          im.pixels[(static_cast<size_t>(ch) * resolution + (y0 + y)) * resolution + (x0 + x)] = color[ch];
        }
      }
    }
  }
  return im;
}

std::vector<RawRecord> generate_pairs(int count, double noise_rate, uint64_t seed, const GeneratorOptions& opt) {
  if (count < 1) throw std::invalid_argument("generate_pairs: count must be ≥ 1");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw std::invalid_argument("generate_pairs: noise_rate outside [0, 1]");

  std::mt19937_64 rng(seed);
  const std::vector<Latent> pool = all_latents();
  std::vector<size_t> order(pool.size());
  std::vector<RawRecord> out(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const size_t slot = static_cast<size_t>(i) % pool.size();
    if (slot == 0) {
      std::iota(order.begin(), order.end(), size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
    }
    out[static_cast<size_t>(i)].latent = pool[order[slot]];
  }

  std::vector<size_t> noisy(static_cast<size_t>(count));
  std::iota(noisy.begin(), noisy.end(), size_t{0});
  std::shuffle(noisy.begin(), noisy.end(), rng);
  noisy.resize(static_cast<size_t>(std::llround(noise_rate * count)));
  std::sort(noisy.begin(), noisy.end());
  for (auto& r : out) r.text_latent = r.latent;
  if (noisy.size() >= 2) {
    for (size_t j = 0; j < noisy.size(); ++j) out[noisy[j]].text_latent = out[noisy[(j + 1) % noisy.size()]].latent;
  } else if (noisy.size() == 1) {
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    Latent other;
    do other = pool[pick(rng)];
    while (other == out[noisy[0]].latent);
    out[noisy[0]].text_latent = other;
  }

  for (int i = 0; i < count; ++i) {
    RawRecord& r = out[static_cast<size_t>(i)];
    auto prng = record_rng(seed, static_cast<uint64_t>(i), 0x5eed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    r.id = i;
    r.is_match = r.text_latent == r.latent;
    r.image = render_image(r.latent, opt.resolution);
    for (int f = 0; f < 3; ++f) r.fields[static_cast<size_t>(f)] = render_text(r.text_latent, static_cast<TextField>(f));

    std::uniform_int_distribution<int> height(100, 600);
    r.declared_height = height(prng);
    std::uniform_int_distribution<int> width(std::max(100, (r.declared_height + 3) / 4),
                                             std::min(4 * r.declared_height, 800));
    r.declared_width = width(prng);
    if (u(prng) < opt.bad_dimension_rate) {
      if (u(prng) < 0.5) {
        std::uniform_int_distribution<int> small(20, 99);
        r.declared_width = small(prng);
      } else {
        r.declared_width = 4 * r.declared_height + 1 + static_cast<int>(u(prng) * 100);
      }
    }
    if (u(prng) < opt.short_query_rate) {
      for (const auto& cell : r.text_latent.cells) {
        if (!cell) continue;
        r.fields[2] = TokenSequence::from_ids({kClsId, vocab::shape_id(cell->shape)});
        break;
      }
    }
    if (u(prng) < opt.sensitive_rate) {
      auto ids = r.fields[1].ids;
      ids.push_back(vocab::id(vocab::kBlockedWord));
      r.fields[1] = TokenSequence::from_ids(ids);
    }
    std::normal_distribution<double> noise(0.0, opt.ctr_noise);
    r.ctr = std::clamp((r.is_match ? 0.7 : 0.3) + noise(prng), 0.0, 1.0);
  }
  return out;
}

const TokenSequence& sample_text_field(const RawRecord& record, std::mt19937_64& rng, FieldMode mode) {
  std::array<bool, 3> allowed{true, true, true};
  switch (mode) {
    case FieldMode::all:
      break;
    case FieldMode::title_only:
      allowed = {true, false, false};
      break;
    case FieldMode::content_only:
      allowed = {false, true, false};
      break;
    case FieldMode::query_only:
      allowed = {false, false, true};
      break;
    case FieldMode::no_title:
      allowed = {false, true, true};
      break;
    case FieldMode::no_content:
      allowed = {true, false, true};
      break;
    case FieldMode::no_query:
      allowed = {true, true, false};
      break;
  }
  size_t eligible[3];
  size_t n = 0;
  for (size_t f = 0; f < 3; ++f) {
    if (allowed[f] && record.usable[f]) eligible[n++] = f;
  }
  if (n == 0) throw std::invalid_argument("sample_text_field: record " + std::to_string(record.id) + " has no usable field");
  std::uniform_int_distribution<size_t> pick(0, n - 1);
  return record.fields[eligible[pick(rng)]];
}

bool FilterRule::blocklisted(const TokenSequence& text) {
  const int32_t blocked = vocab::id(vocab::kBlockedWord);
  return std::find(text.ids.begin(), text.ids.end(), blocked) != text.ids.end();
}

std::string to_string(DropReason r) {
  switch (r) {
    case DropReason::none:
      return "none";
    case DropReason::min_dimension:
      return "min_dimension";
    case DropReason::aspect_ratio:
      return "aspect_ratio";
    case DropReason::text_length:
      return "text_length";
    case DropReason::sensitive:
      return "sensitive";
  }
  return "?";
}

FilterResult apply_filters(const RawRecord& record, const FilterRule& rules) {
  FilterResult res;
  const int64_t w = record.declared_width, h = record.declared_height;
  if (w < rules.min_dimension || h < rules.min_dimension) {
    res.keep = false;
    res.reason = DropReason::min_dimension;
  } else if (w > rules.max_aspect * h || h > rules.max_aspect * w) {
    res.keep = false;
    res.reason = DropReason::aspect_ratio;
  }
  bool any = false;
  for (size_t f = 0; f < 3; ++f) {
    const TokenSequence& t = record.fields[f];
    const int n = t.word_count();
    DropReason why = DropReason::none;
    if (n < rules.min_words || n > rules.max_words) {
      why = DropReason::text_length;
    } else if (rules.sensitive ? rules.sensitive(t) : FilterRule::blocklisted(t)) {
      why = DropReason::sensitive;
    }
    res.field_ok[f] = why == DropReason::none;
    res.field_reason[f] = why;
    any = any || res.field_ok[f];
  }
  if (res.keep && !any) {
    res.keep = false;
    res.reason = res.field_reason[0];
  }
  return res;
}

std::vector<RawRecord> filter_records(std::vector<RawRecord> records, const FilterRule& rules) {
  std::vector<RawRecord> out;
  for (auto& r : records) {
    FilterResult res = apply_filters(r, rules);
    if (!res.keep) continue;
    for (size_t f = 0; f < 3; ++f) r.usable[f] = r.usable[f] && res.field_ok[f];
    out.push_back(std::move(r));
  }
  return out;
}

size_t ctr_select_count(size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("ctr_rank_select: fraction outside (0, 1]");
  const long double x = static_cast<long double>(fraction) * static_cast<long double>(n);
  const long double nearest = std::round(x);
  // fraction·N lands a hair above an integer for decimals such as 0.1·30
  if (std::abs(x - nearest) <= 1e-9L * std::max<long double>(1.0L, x)) return static_cast<size_t>(nearest);
  return static_cast<size_t>(std::ceil(x));
}

std::vector<RawRecord> ctr_rank_select(std::vector<RawRecord> records, double fraction) {
  const size_t k = ctr_select_count(records.size(), fraction);
  std::stable_sort(records.begin(), records.end(), [](const RawRecord& a, const RawRecord& b) { return a.ctr > b.ctr; });
  records.resize(k);
  return records;
}

uint64_t image_hash(const ImageInput& image) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  const int32_t dims[3] = {image.channels, image.height, image.width};
  mix(dims, sizeof dims);
  mix(image.pixels.data(), image.pixels.size() * sizeof(double));
  return h;
}

LeakageReport leakage_check(const std::vector<RawRecord>& pretrain, const std::vector<RawRecord>& downstream,
                            bool remove) {
  std::unordered_multimap<uint64_t, size_t> down;
  for (size_t j = 0; j < downstream.size(); ++j) down.emplace(image_hash(downstream[j].image), j);
  LeakageReport rep;
  for (size_t i = 0; i < pretrain.size(); ++i) {
    const uint64_t h = image_hash(pretrain[i].image);
    auto [lo, hi] = down.equal_range(h);
    bool leaked = false;
    for (auto it = lo; it != hi; ++it) {
      rep.hits.push_back({i, it->second, h});
      leaked = true;
    }
    if (remove && !leaked) rep.cleaned.push_back(pretrain[i]);
  }
  std::sort(rep.hits.begin(), rep.hits.end(), [](const LeakageHit& a, const LeakageHit& b) {
    return std::tie(a.pretrain_index, a.downstream_index) < std::tie(b.pretrain_index, b.downstream_index);
  });
  return rep;
}

void assign_splits(std::vector<RawRecord>& records, uint64_t seed) {
  const size_t n = records.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto train = static_cast<size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto val = std::min(n - train, static_cast<size_t>(std::llround(0.1 * static_cast<double>(n))));
  for (size_t i = 0; i < n; ++i) {
    records[order[i]].split = i < train ? Split::train : i < train + val ? Split::val : Split::test;
  }
}

std::vector<const RawRecord*> select_split(const std::vector<RawRecord>& records, Split split) {
  std::vector<const RawRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<RawRecord>& records, int max_text_len) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  if (records.empty()) throw std::invalid_argument("write_dataset: no records");
  const ImageInput& first = records.front().image;

  std::ofstream index(root / "index.tsv");
  std::ofstream pixels(root / "pixels.bin", std::ios::binary);
  std::ofstream tokens(root / "tokens.bin", std::ios::binary);
  index << "id\tctr\tsplit\ttitle_len\tcontent_len\tquery_len\tis_match\twidth\theight\tlatent\ttext_latent\tusable\n";
  char ctr[32];
  for (const auto& r : records) {
    if (r.image.channels != first.channels || r.image.height != first.height || r.image.width != first.width) {
      throw std::invalid_argument("write_dataset: images differ in shape");
    }
    std::snprintf(ctr, sizeof ctr, "%.17g", r.ctr);
    index << r.id << '\t' << ctr << '\t' << to_string(r.split);
    for (const auto& f : r.fields) index << '\t' << f.size();
    index << '\t' << (r.is_match ? 1 : 0) << '\t' << r.declared_width << '\t' << r.declared_height << '\t'
          << r.latent.code() << '\t' << r.text_latent.code() << '\t';
    for (bool u : r.usable) index << (u ? '1' : '0');
    index << '\n';

    for (double p : r.image.pixels) {
      const long v = std::lround(std::clamp(p, 0.0, 1.0) * 255.0);
      pixels.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
    for (const auto& f : r.fields) {
      if (static_cast<int>(f.size()) > max_text_len) {
        throw std::invalid_argument("write_dataset: record " + std::to_string(r.id) + " has a text longer than " +
                                    std::to_string(max_text_len));
      }
      for (int i = 0; i < max_text_len; ++i) put_i32(tokens, i < static_cast<int>(f.size()) ? f.ids[static_cast<size_t>(i)] : kPadId);
    }
  }

  nlohmann::json meta;
  meta["format"] = "r2d2-synthetic";
  meta["version"] = 1;
  meta["count"] = records.size();
  meta["channels"] = first.channels;
  meta["height"] = first.height;
  meta["width"] = first.width;
  meta["max_text_len"] = max_text_len;
  meta["fields"] = {"title", "content", "query"};
  meta["pixels"] = "uint8, record-major, channel-major (C,H,W), value = round(255*p)";
  meta["tokens"] = "int32 little-endian, record-major, 3 fields x max_text_len, padded with 0";
  meta["vocab"] = words();
  std::ofstream(root / "meta.json") << meta.dump(2) << '\n';
  if (!index || !pixels || !tokens) throw std::runtime_error("write_dataset: write failed in " + dir);
}

std::vector<RawRecord> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream meta_in(root / "meta.json");
  if (!meta_in) throw std::runtime_error("read_dataset: missing meta.json in " + dir);
  const auto meta = nlohmann::json::parse(meta_in);
  if (meta.value("format", "") != "r2d2-synthetic" || meta.value("version", 0) != 1) {
    throw std::runtime_error("read_dataset: unsupported format in " + dir);
  }
  const size_t count = meta["count"];
  const int channels = meta["channels"], height = meta["height"], width = meta["width"];
  const int max_len = meta["max_text_len"];
  const auto pix = slurp(root / "pixels.bin");
  const auto tok = slurp(root / "tokens.bin");
  const size_t image_bytes = static_cast<size_t>(channels * height * width);
  const size_t token_bytes = static_cast<size_t>(3 * max_len * 4);
  if (pix.size() != count * image_bytes || tok.size() != count * token_bytes) {
    throw std::runtime_error("read_dataset: binary sizes do not match meta.json");
  }

  std::ifstream index(root / "index.tsv");
  std::string line;
  std::getline(index, line);
  std::vector<RawRecord> out;
  for (size_t k = 0; k < count; ++k) {
    if (!std::getline(index, line)) throw std::runtime_error("read_dataset: index.tsv too short");
    std::istringstream is(line);
    RawRecord r;
    std::string split, usable;
    size_t lens[3];
    int match;
    int64_t latent, text_latent;
    is >> r.id >> r.ctr >> split >> lens[0] >> lens[1] >> lens[2] >> match >> r.declared_width >> r.declared_height >>
        latent >> text_latent >> usable;
    if (!is || usable.size() != 3) throw std::runtime_error("read_dataset: malformed index line " + std::to_string(k + 2));
    r.split = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
    r.is_match = match != 0;
    r.latent = Latent::from_code(latent);
    r.text_latent = Latent::from_code(text_latent);
    for (size_t f = 0; f < 3; ++f) r.usable[f] = usable[f] == '1';

    r.image.channels = channels;
    r.image.height = height;
    r.image.width = width;
    r.image.pixels.resize(image_bytes);
    for (size_t i = 0; i < image_bytes; ++i) r.image.pixels[i] = pix[k * image_bytes + i] / 255.0;
    for (size_t f = 0; f < 3; ++f) {
      if (lens[f] > static_cast<size_t>(max_len)) throw std::runtime_error("read_dataset: field length exceeds max_text_len");
      std::vector<int32_t> ids(lens[f]);
      for (size_t i = 0; i < lens[f]; ++i) ids[i] = get_i32(&tok[k * token_bytes + (f * static_cast<size_t>(max_len) + i) * 4]);
      r.fields[f] = TokenSequence::from_ids(std::move(ids));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace r2d2
