#pragma once

#include "r2d2/config.hpp"
#include "r2d2/model.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace r2d2 {

// Toy world: up to one object per image quadrant, each with a color and a
// shape. Images render the layout as raw pixels; texts name the same
// attributes as tokens.

inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumQuadrants = 4;

enum class Color : int8_t { red, green, blue, yellow };
enum class Shape : int8_t { square, circle, triangle, cross };

struct Object {
  Color color = Color::red;
  Shape shape = Shape::square;
  bool operator==(const Object&) const = default;
};

/// Quadrants in reading order: top-left, top-right, bottom-left, bottom-right.
struct Latent {
  std::array<std::optional<Object>, kNumQuadrants> cells;

  int object_count() const;
  /// Injective integer code (base 17, one digit per quadrant).
  int64_t code() const;
  static Latent from_code(int64_t code);
  bool operator==(const Latent&) const = default;
};

/// Every latent with one or two objects, in code order.
std::vector<Latent> all_latents();

namespace vocab {

std::string word(int32_t id);
int32_t id(const std::string& word);
/// Words after [CLS], joined by spaces.
std::string decode(const TokenSequence& tokens);
TokenSequence encode(const std::string& text);
int32_t color_id(Color c);
int32_t shape_id(Shape s);
int32_t size();
/// Token the default sensitive-content predicate rejects.
inline const std::string kBlockedWord = "forbidden";

}  // namespace vocab

enum class TextField { title = 0, content = 1, query = 2 };
std::string to_string(TextField f);

/// "photo of <obj> and <obj>" style text for each field.
TokenSequence render_text(const Latent& latent, TextField field);

/// Channel-major RGB rendering; shapes are drawn in binary colors on black.
ImageInput render_image(const Latent& latent, int resolution);

enum class Split : uint8_t { train = 0, val = 1, test = 2 };
std::string to_string(Split s);

struct RawRecord {
  int64_t id = 0;
  Latent latent;       // what the image shows
  Latent text_latent;  // what the texts describe
  ImageInput image;
  int declared_width = 0;
  int declared_height = 0;
  std::array<TokenSequence, 3> fields;  // title, content, query
  std::array<bool, 3> usable{true, true, true};
  double ctr = 0.0;
  bool is_match = true;
  Split split = Split::train;

  const TokenSequence& field(TextField f) const { return fields[static_cast<size_t>(f)]; }
};

/// Corruption knobs so the filters have something to remove. All default to 0.
struct GeneratorOptions {
  int resolution = 32;
  double bad_dimension_rate = 0.0;  // declared size under 100 px or aspect out of range
  double short_query_rate = 0.0;    // query reduced to one word
  double sensitive_rate = 0.0;      // blocked word inserted into the content
  double ctr_noise = 0.15;          // std of the additive CTR noise
};

/// Deterministic under `seed`. Latents are drawn without replacement while
/// the pool lasts. A `noise_rate` fraction of records carry another record's
/// texts (is_match = false) and a lower expected CTR.
std::vector<RawRecord> generate_pairs(int count, double noise_rate, uint64_t seed,
                                      const GeneratorOptions& options = {});

/// Uniform draw among usable fields admitted by `mode`. Throws
/// std::invalid_argument when no field qualifies.
const TokenSequence& sample_text_field(const RawRecord& record, std::mt19937_64& rng,
                                       FieldMode mode = FieldMode::all);

struct FilterRule {
  int min_dimension = 100;
  int max_aspect = 4;  // width/height and height/width both ≤ this
  int min_words = 2;
  int max_words = 128;
  std::function<bool(const TokenSequence&)> sensitive;  // empty: blocklist

  static bool blocklisted(const TokenSequence& text);
};

enum class DropReason { none, min_dimension, aspect_ratio, text_length, sensitive };
std::string to_string(DropReason r);

struct FilterResult {
  bool keep = true;
  DropReason reason = DropReason::none;
  std::array<bool, 3> field_ok{true, true, true};
  std::array<DropReason, 3> field_reason{DropReason::none, DropReason::none, DropReason::none};
};

/// Image rules drop the record; text rules disable single fields and drop the
/// record only when no field survives. Boundaries are inclusive.
FilterResult apply_filters(const RawRecord& record, const FilterRule& rules = {});
/// Keeps surviving records with their unusable fields marked.
std::vector<RawRecord> filter_records(std::vector<RawRecord> records, const FilterRule& rules = {});

/// Stable descending sort by CTR, top ⌈fraction·N⌉.
std::vector<RawRecord> ctr_rank_select(std::vector<RawRecord> records, double fraction);
size_t ctr_select_count(size_t n, double fraction);

uint64_t image_hash(const ImageInput& image);

struct LeakageHit {
  size_t pretrain_index;
  size_t downstream_index;
  uint64_t hash;
};
struct LeakageReport {
  std::vector<LeakageHit> hits;
  std::vector<RawRecord> cleaned;  // pretrain set minus hits, when requested
};
LeakageReport leakage_check(const std::vector<RawRecord>& pretrain, const std::vector<RawRecord>& downstream,
                            bool remove = false);

/// Shuffles with `seed` and labels 8:1:1 (rounded) train/val/test.
void assign_splits(std::vector<RawRecord>& records, uint64_t seed);
std::vector<const RawRecord*> select_split(const std::vector<RawRecord>& records, Split split);

/// Directory layout documented in the README: index.tsv, pixels.bin,
/// tokens.bin, meta.json.
void write_dataset(const std::string& dir, const std::vector<RawRecord>& records, int max_text_len);
std::vector<RawRecord> read_dataset(const std::string& dir);

}  // namespace r2d2
