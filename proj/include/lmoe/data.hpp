#pragma once

// Corpus ingestion, character-level vocabulary, synthetic multi-task
// generation, and deterministic batching.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lmoe/errors.hpp"
#include "lmoe/objective.hpp"
#include "lmoe/random.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

// Prompt/completion separator used by the synthetic tasks (U+2192).
inline constexpr char32_t kSeparator = U'→';

// ---------------------------------------------------------------------------
// UTF-8 helpers (the vocabulary is over codepoints, not bytes)
// ---------------------------------------------------------------------------

inline std::vector<char32_t> utf8_decode(std::string_view s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    char32_t cp;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c >> 4) == 0xe) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c >> 3) == 0x1e) {
      len = 4;
      cp = c & 0x07;
    } else {
      throw data_error("utf8: invalid lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) throw data_error("utf8: truncated sequence");
    for (std::size_t k = 1; k < len; ++k) {
      const unsigned char cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) throw data_error("utf8: invalid continuation byte");
      cp = (cp << 6) | (cc & 0x3f);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

// Character-level vocabulary. Id 0 is the pad symbol; the remaining ids are
// the corpus characters (plus the separator) sorted by codepoint, so the
// assignment is deterministic for a given corpus.
struct Vocab {
  std::vector<char32_t> id_to_char;  // index 0 is the pad placeholder
  std::map<char32_t, std::int32_t> char_to_id;
  std::int32_t pad_id = 0;

  std::size_t size() const { return id_to_char.size(); }

  std::int32_t id_of(char32_t c) const {
    auto it = char_to_id.find(c);
    if (it == char_to_id.end()) {
      throw vocab_error("vocab: character '" + utf8_encode(c) + "' (U+" +
                        std::to_string(static_cast<std::uint32_t>(c)) +
                        ") is not in the vocabulary");
    }
    return it->second;
  }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    for (char32_t c : utf8_decode(text)) ids.push_back(id_of(c));
    return ids;
  }

  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (std::int32_t id : ids) {
      if (id == pad_id) continue;
      if (id < 0 || static_cast<std::size_t>(id) >= id_to_char.size()) {
        throw vocab_error("vocab: id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(id_to_char.size()));
      }
      out += utf8_encode(id_to_char[static_cast<std::size_t>(id)]);
    }
    return out;
  }
};

// One prompt-completion pair tagged with the task that produced it.
struct TaskExample {
  std::string prompt;
  std::string completion;
  std::string task;
};

inline Vocab build_vocab(const std::vector<TaskExample>& corpus) {
  if (corpus.empty()) throw data_error("build_vocab: empty corpus");
  std::vector<char32_t> chars{kSeparator};
  for (const auto& ex : corpus) {
    for (char32_t c : utf8_decode(ex.prompt)) chars.push_back(c);
    for (char32_t c : utf8_decode(ex.completion)) chars.push_back(c);
  }
  std::sort(chars.begin(), chars.end());
  chars.erase(std::unique(chars.begin(), chars.end()), chars.end());

  Vocab v;
  v.id_to_char.push_back(U'\0');  // pad
  for (char32_t c : chars) {
    v.char_to_id[c] = static_cast<std::int32_t>(v.id_to_char.size());
    v.id_to_char.push_back(c);
  }
  return v;
}

// ---------------------------------------------------------------------------
// synthetic multi-task generation
// ---------------------------------------------------------------------------

namespace detail {

inline TaskExample make_task_example(const std::string& task, Rng& rng) {
  const std::string sep = utf8_encode(kSeparator);
  if (task == "copy" || task == "reverse" || task == "sort") {
    const std::size_t len = 3 + rng.below(4);  // 3..6
    std::string payload;
    for (std::size_t i = 0; i < len; ++i) {
      payload += (task == "sort") ? static_cast<char>('0' + rng.below(10))
                                  : static_cast<char>('a' + rng.below(10));
    }
    std::string completion = payload;
    if (task == "reverse") std::reverse(completion.begin(), completion.end());
    if (task == "sort") std::sort(completion.begin(), completion.end());
    return {payload + sep, completion, task};
  }
  if (task == "add") {
    const int a = static_cast<int>(rng.below(100));
    const int b = static_cast<int>(rng.below(100));
    return {std::to_string(a) + "+" + std::to_string(b) + "=", std::to_string(a + b), task};
  }
  throw config_error("gen_synthetic: unknown task '" + task + "'");
}

}  // namespace detail

// Deterministic synthetic corpus; tasks are assigned round-robin so counts
// stay balanced within one example.
inline std::vector<TaskExample> gen_synthetic(const std::vector<std::string>& tasks,
                                              std::size_t count, std::uint64_t seed) {
  if (tasks.empty()) throw config_error("gen_synthetic: empty task set");
  if (count == 0) throw config_error("gen_synthetic: count must be >= 1");
  Rng rng(stream_seed(seed, "synthetic"));
  std::vector<TaskExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(detail::make_task_example(tasks[i % tasks.size()], rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// corpus file loading
// ---------------------------------------------------------------------------

// Plain text becomes prompt-less examples: fixed-size character chunks whose
// every next-token position is a training target.
inline std::vector<TaskExample> load_text_corpus(const std::string& path,
                                                 std::size_t chunk_chars) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("corpus: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto chars = utf8_decode(text);
  if (chars.empty()) throw data_error("corpus: '" + path + "' is empty");

  std::vector<TaskExample> out;
  for (std::size_t start = 0; start < chars.size(); start += chunk_chars) {
    std::string chunk;
    const std::size_t end = std::min(chars.size(), start + chunk_chars);
    for (std::size_t i = start; i < end; ++i) chunk += utf8_encode(chars[i]);
    if (end - start >= 2) out.push_back({"", chunk, "lm"});
  }
  if (out.empty()) throw data_error("corpus: '" + path + "' has no usable chunks");
  return out;
}

// JSON-lines corpus with fields {prompt, completion, task}.
inline std::vector<TaskExample> load_jsonl_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("corpus: cannot open '" + path + "'");
  std::vector<TaskExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error("corpus: '" + path + "' line " + std::to_string(lineno) +
                       ": " + e.what());
    }
    TaskExample ex;
    ex.prompt = j.value("prompt", std::string{});
    if (!j.contains("completion")) {
      throw data_error("corpus: '" + path + "' line " + std::to_string(lineno) +
                       ": missing 'completion'");
    }
    ex.completion = j.at("completion").get<std::string>();
    ex.task = j.value("task", std::string{"default"});
    if (ex.completion.empty()) {
      throw data_error("corpus: '" + path + "' line " + std::to_string(lineno) +
                       ": empty completion");
    }
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw data_error("corpus: '" + path + "' has no examples");
  return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<TaskExample> examples;
  Vocab vocab;
};

// Deterministic batcher: the batch for a given step is a pure function of
// (dataset, batch size, seq len, seed, step). Each epoch re-shuffles the
// example order with a seed derived from (seed, epoch).
class Batcher {
 public:
  Batcher(const Dataset& data, std::size_t batch_size, std::size_t seq_len,
          std::uint64_t seed)
      : data_(&data), batch_(batch_size), seq_(seq_len), seed_(seed) {
    if (batch_size == 0) throw config_error("batcher: batch_size must be > 0");
    if (seq_len == 0) throw config_error("batcher: seq_len must be > 0");
    if (data.examples.empty()) throw data_error("batcher: empty dataset");
  }

  std::size_t batches_per_epoch() const {
    return std::max<std::size_t>(1, data_->examples.size() / batch_);
  }

  BatchTargets batch_for_step(std::uint64_t step) const {
    const std::size_t bpe = batches_per_epoch();
    const std::uint64_t epoch = step / bpe;
    const std::size_t slot = static_cast<std::size_t>(step % bpe);

    std::vector<std::size_t> order(data_->examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(stream_seed(seed_, "shuffle") ^ splitmix64(epoch));
    rng.shuffle(order);

    BatchTargets out;
    out.inputs.batch = batch_;
    out.inputs.seq = seq_;
    out.inputs.ids.assign(batch_ * seq_, data_->vocab.pad_id);
    out.targets.assign(batch_ * seq_, data_->vocab.pad_id);
    out.mask.assign(batch_ * seq_, 0);
    out.pad.assign(batch_ * seq_, 1);
    out.row_tasks.resize(batch_);

    for (std::size_t row = 0; row < batch_; ++row) {
      const std::size_t pick = order[(slot * batch_ + row) % order.size()];
      const TaskExample& ex = data_->examples[pick];
      encode_into(ex, row, out);
    }
    return out;
  }

 private:
  void encode_into(const TaskExample& ex, std::size_t row, BatchTargets& out) const {
    const Vocab& vocab = data_->vocab;
    std::vector<std::int32_t> prompt_ids = vocab.encode(ex.prompt);
    std::vector<std::int32_t> completion_ids = vocab.encode(ex.completion);

    std::vector<std::int32_t> seq = prompt_ids;
    seq.insert(seq.end(), completion_ids.begin(), completion_ids.end());
    if (seq.size() > seq_ + 1) seq.resize(seq_ + 1);  // truncate, keep T+1 chars
    const std::size_t prompt_len = prompt_ids.size();
    const std::size_t usable = seq.size() - 1;  // next-token pairs

    out.row_tasks[row] = ex.task;
    for (std::size_t t = 0; t < usable; ++t) {
      const std::size_t k = row * seq_ + t;
      out.inputs.ids[k] = seq[t];
      out.targets[k] = seq[t + 1];
      out.pad[k] = 0;
      // A position is a loss target when the token it predicts belongs to
      // the completion.
      out.mask[k] = (t + 1 >= prompt_len) ? 1 : 0;
    }
  }

  const Dataset* data_;
  std::size_t batch_;
  std::size_t seq_;
  std::uint64_t seed_;
};

}  // namespace lmoe
