#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rnnkit/sequence.hpp"

namespace rnnkit {

// Benchmark data (delayed-copy task, byte-level text) and the checkpoint
// format. Checkpoints are a short ASCII header followed by a raw
// little-endian float64 payload; round-trips are bit-exact.

template <typename S>
VectorT<S> one_hot(Index k, Index size) {
  if (k < 0 || k >= size) {
    throw ShapeError("one_hot: index " + std::to_string(k) + " outside [0, " +
                     std::to_string(size) + ")");
  }
  VectorT<S> v = VectorT<S>::Zero(size);
  v[k] = S(1);
  return v;
}

template <typename S>
Index argmax(const VectorT<S>& v) {
  if (v.size() == 0) throw ShapeError("argmax: empty vector");
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;  // strict: ties keep the lowest index
  }
  return best;
}

// ---------------------------------------------------------------------------
// Delayed copy: the long-range memory benchmark. A data symbol appears at
// t=0, followed by `lag` steps of a dedicated filler symbol; the model
// must emit the data symbol at the final step. Symbol ids 0..K-2 are
// data, id K-1 is the filler.

template <typename S>
SequenceSample<S> make_copy_sample(Index num_symbols, Index lag, Rng& rng) {
  if (num_symbols < 2) throw ConfigError("copy task needs at least 2 symbols");
  if (lag < 1) throw ConfigError("copy task needs lag >= 1");
  const Index data_symbol = static_cast<Index>(rng.uniform_int(
      static_cast<std::uint64_t>(num_symbols - 1)));
  SequenceSample<S> s;
  s.inputs.reserve(static_cast<std::size_t>(lag + 1));
  s.inputs.push_back(one_hot<S>(data_symbol, num_symbols));
  for (Index t = 0; t < lag; ++t) {
    s.inputs.push_back(one_hot<S>(num_symbols - 1, num_symbols));
  }
  s.targets.push_back(one_hot<S>(data_symbol, num_symbols));
  return s;
}

// ---------------------------------------------------------------------------
// Byte-level text.

struct Vocab {
  std::vector<unsigned char> id_to_byte;
  std::array<int, 256> byte_to_id{};

  Vocab() { byte_to_id.fill(-1); }

  static Vocab from_bytes(const std::vector<unsigned char>& sorted_unique) {
    Vocab v;
    v.id_to_byte = sorted_unique;
    for (std::size_t i = 0; i < sorted_unique.size(); ++i) {
      v.byte_to_id[sorted_unique[i]] = static_cast<int>(i);
    }
    return v;
  }

  static Vocab from_text(const std::string& text) {
    std::array<bool, 256> seen{};
    for (unsigned char ch : text) seen[ch] = true;
    std::vector<unsigned char> bytes;
    for (int b = 0; b < 256; ++b) {
      if (seen[b]) bytes.push_back(static_cast<unsigned char>(b));
    }
    return from_bytes(bytes);
  }

  Index size() const { return static_cast<Index>(id_to_byte.size()); }

  int id_of(unsigned char ch) const { return byte_to_id[ch]; }
};

struct TextDataset {
  Vocab vocab;
  std::vector<int> ids;
};

inline TextDataset load_text_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open text corpus: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.size() < 2) throw IoError("text corpus too short: " + path);

  TextDataset ds;
  ds.vocab = Vocab::from_text(text);
  ds.ids.reserve(text.size());
  for (unsigned char ch : text) ds.ids.push_back(ds.vocab.id_of(ch));
  return ds;
}

// Next-byte prediction window: inputs are ids[start .. start+len-1],
// targets the same ids shifted one step ahead.
template <typename S>
SequenceSample<S> text_window(const TextDataset& ds, Index start, Index len) {
  const Index last_needed = start + len;  // target of the final step
  if (start < 0 || len < 1 || last_needed > static_cast<Index>(ds.ids.size()) - 1) {
    throw ShapeError("text_window: window [" + std::to_string(start) + ", +" +
                     std::to_string(len) + "] exceeds corpus of " +
                     std::to_string(ds.ids.size()) + " symbols");
  }
  const Index K = ds.vocab.size();
  SequenceSample<S> s;
  s.inputs.reserve(static_cast<std::size_t>(len));
  s.targets.reserve(static_cast<std::size_t>(len));
  for (Index t = 0; t < len; ++t) {
    s.inputs.push_back(one_hot<S>(ds.ids[static_cast<std::size_t>(start + t)], K));
    s.targets.push_back(one_hot<S>(ds.ids[static_cast<std::size_t>(start + t + 1)], K));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr const char* kCheckpointMagic = "rnnkit-checkpoint v1";

struct TensorRecord {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::vector<double> data;

  Index size() const { return rows * cols; }
};

struct Checkpoint {
  std::string arch;     // rnn | lstm | gru
  std::string scalar;   // f32 | f64 (runtime precision; payload is f64)
  std::uint64_t step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::string config_json;  // one line, opaque here
  std::vector<int> vocab;   // byte values; empty when the task has none
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t f64_to_le_bits(double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t sw = 0;
    for (int i = 0; i < 8; ++i) sw |= ((bits >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    bits = sw;
  }
  return bits;
}

inline double f64_from_le_bits(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t sw = 0;
    for (int i = 0; i < 8; ++i) sw |= ((bits >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    bits = sw;
  }
  double x;
  std::memcpy(&x, &bits, sizeof(x));
  return x;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);

  out << kCheckpointMagic << "\n";
  out << "arch " << ck.arch << "\n";
  out << "scalar " << ck.scalar << "\n";
  out << "step " << ck.step << "\n";
  out << "rng " << ck.rng_seed << " " << ck.rng_counter << "\n";
  out << "config " << ck.config_json << "\n";
  if (!ck.vocab.empty()) {
    out << "vocab " << ck.vocab.size();
    for (int b : ck.vocab) out << " " << b;
    out << "\n";
  }
  out << "tensors " << ck.tensors.size() << "\n";
  for (const auto& t : ck.tensors) {
    if (t.size() != static_cast<Index>(t.data.size())) {
      throw IoError("checkpoint tensor " + t.name + " has inconsistent size");
    }
    out << t.name << " " << t.rows << " " << t.cols << "\n";
  }
  out << "payload\n";
  for (const auto& t : ck.tensors) {
    for (double x : t.data) {
      const std::uint64_t bits = detail::f64_to_le_bits(x);
      char raw[8];
      std::memcpy(raw, &bits, 8);
      out.write(raw, 8);
    }
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  Checkpoint ck;
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw IoError("checkpoint truncated: " + path);
    return line;
  };

  if (next_line() != kCheckpointMagic) {
    throw IoError("not a checkpoint file: " + path);
  }
  std::size_t tensor_count = 0;
  bool saw_tensors = false;
  while (true) {
    std::string l = next_line();
    if (l == "payload") {
      if (!saw_tensors) throw IoError("checkpoint missing tensor table: " + path);
      break;
    }
    std::istringstream ls(l);
    std::string key;
    ls >> key;
    if (key == "arch") {
      ls >> ck.arch;
    } else if (key == "scalar") {
      ls >> ck.scalar;
    } else if (key == "step") {
      ls >> ck.step;
    } else if (key == "rng") {
      ls >> ck.rng_seed >> ck.rng_counter;
    } else if (key == "config") {
      const auto pos = l.find(' ');
      ck.config_json = pos == std::string::npos ? "" : l.substr(pos + 1);
    } else if (key == "vocab") {
      std::size_t n = 0;
      ls >> n;
      ck.vocab.resize(n);
      for (auto& b : ck.vocab) ls >> b;
      if (!ls) throw IoError("checkpoint has malformed vocab line: " + path);
    } else if (key == "tensors") {
      ls >> tensor_count;
      if (!ls) throw IoError("checkpoint has malformed tensor count: " + path);
      saw_tensors = true;
      ck.tensors.reserve(tensor_count);
      for (std::size_t i = 0; i < tensor_count; ++i) {
        std::istringstream ts(next_line());
        TensorRecord t;
        ts >> t.name >> t.rows >> t.cols;
        if (!ts || t.rows < 0 || t.cols < 0) {
          throw IoError("checkpoint has malformed tensor entry: " + path);
        }
        ck.tensors.push_back(std::move(t));
      }
    } else {
      throw IoError("checkpoint has unknown header line '" + l + "': " + path);
    }
  }

  for (auto& t : ck.tensors) {
    t.data.resize(static_cast<std::size_t>(t.size()));
    for (double& x : t.data) {
      char raw[8];
      in.read(raw, 8);
      if (in.gcount() != 8) throw IoError("checkpoint payload truncated: " + path);
      std::uint64_t bits;
      std::memcpy(&bits, raw, 8);
      x = detail::f64_from_le_bits(bits);
    }
  }
  char extra;
  if (in.read(&extra, 1), in.gcount() != 0) {
    throw IoError("checkpoint has trailing bytes: " + path);
  }
  return ck;
}

// Parameter tensors into checkpoint records (payload is always f64).
template <typename S>
void record_views(Checkpoint& ck, const std::vector<TensorView<const S>>& views,
                  const std::string& prefix = "") {
  for (const auto& v : views) {
    TensorRecord t;
    t.name = prefix + v.name;
    t.rows = v.rows;
    t.cols = v.cols;
    t.data.resize(static_cast<std::size_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) t.data[static_cast<std::size_t>(i)] = v.data[i];
    ck.tensors.push_back(std::move(t));
  }
}

template <typename S>
void restore_views(const Checkpoint& ck, std::vector<TensorView<S>> views,
                   const std::string& prefix = "") {
  for (auto& v : views) {
    const TensorRecord* t = ck.find(prefix + v.name);
    if (t == nullptr) throw IoError("checkpoint is missing tensor " + prefix + v.name);
    if (t->rows != v.rows || t->cols != v.cols) {
      throw IoError("checkpoint tensor " + t->name + " is " + shape_str(t->rows, t->cols) +
                    ", expected " + shape_str(v.rows, v.cols));
    }
    for (Index i = 0; i < v.size(); ++i) {
      v.data[i] = static_cast<S>(t->data[static_cast<std::size_t>(i)]);
    }
  }
}

// Optimizer moments ride along as opt.m.<tensor> / opt.v.<tensor>, plus a
// 1x1 opt.t for the adam step count. Missing records mean the optimizer
// kept no such buffer.
template <typename S>
void record_optimizer(Checkpoint& ck, const OptimizerStateT<S>& st,
                      const std::vector<TensorView<const S>>& params,
                      const std::string& prefix = "") {
  auto push_buffers = [&](const std::vector<VectorT<S>>& buf, const char* tag) {
    if (buf.empty()) return;
    if (buf.size() != params.size()) {
      throw IoError("optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < buf.size(); ++i) {
      TensorRecord t;
      t.name = prefix + "opt." + tag + "." + params[i].name;
      t.rows = buf[i].size();
      t.cols = 1;
      t.data.assign(buf[i].data(), buf[i].data() + buf[i].size());
      ck.tensors.push_back(std::move(t));
    }
  };
  push_buffers(st.m, "m");
  push_buffers(st.v, "v");
  if (st.t != 0) {
    TensorRecord t;
    t.name = prefix + "opt.t";
    t.rows = 1;
    t.cols = 1;
    t.data = {static_cast<double>(st.t)};
    ck.tensors.push_back(std::move(t));
  }
}

template <typename S>
void restore_optimizer(const Checkpoint& ck, OptimizerStateT<S>& st,
                       const std::vector<TensorView<const S>>& params,
                       const std::string& prefix = "") {
  auto pull_buffers = [&](std::vector<VectorT<S>>& buf, const char* tag) {
    buf.clear();
    for (const auto& p : params) {
      const TensorRecord* t = ck.find(prefix + "opt." + tag + "." + p.name);
      if (t == nullptr) {
        if (!buf.empty()) {
          throw IoError("checkpoint has a partial optimizer buffer for " + p.name);
        }
        return;
      }
      if (t->size() != p.size()) {
        throw IoError("optimizer buffer " + t->name + " has wrong size");
      }
      VectorT<S> v(t->size());
      for (Index i = 0; i < t->size(); ++i) v[i] = static_cast<S>(t->data[i]);
      buf.push_back(std::move(v));
    }
  };
  pull_buffers(st.m, "m");
  pull_buffers(st.v, "v");
  st.t = 0;
  if (const TensorRecord* t = ck.find(prefix + "opt.t"); t != nullptr) {
    if (t->size() != 1) throw IoError("opt.t must be a single value");
    st.t = static_cast<std::uint64_t>(t->data[0]);
  }
}

}  // namespace rnnkit
