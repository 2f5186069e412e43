// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "m3/data/batch.hpp"
#include "m3/data/masking.hpp"
#include "m3/data/mixture.hpp"
#include "m3/data/text.hpp"

namespace m3 {

/// Fixed-length encoded sequences stored row-major.
struct EncodedCorpus {
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> attn_mask;
  /// Optional per-row group (language index); empty when ungrouped.
  std::vector<std::uint32_t> group;

  std::size_t size() const noexcept { return seq == 0 ? 0 : ids.size() / seq; }
  static EncodedCorpus encode(const Vocab& vocab, const std::vector<std::string>& texts, std::size_t seq);
};

/// Batches are a pure function of (seed, step): resuming at step k replays
/// exactly the batches an unbroken run would have drawn.
class MlmSampler {
 public:
  MlmSampler(EncodedCorpus corpus, double mask_rate, MaskPolicy policy, std::int32_t vocab_size);
  /// Rows are drawn by language first (smoothed mixture), then uniformly
  /// within the language. `corpus.group` indexes `mixture.languages`.
  MlmSampler(EncodedCorpus corpus, double mask_rate, MaskPolicy policy, std::int32_t vocab_size,
             LanguageMixture mixture);

  /// Every sequence has at least one masked position. Rows without a
  /// maskable token are dropped at construction.
  MlmBatch batch(std::uint64_t seed, std::uint64_t step, std::size_t batch_size) const;
  const EncodedCorpus& corpus() const noexcept { return corpus_; }
  /// Rows skipped at construction because no token could be masked.
  std::size_t dropped_rows() const noexcept { return dropped_; }

 private:
  EncodedCorpus corpus_;
  std::size_t dropped_ = 0;
  double rate_;
  MaskPolicy policy_;
  std::int32_t vocab_size_;
  std::optional<LanguageMixture> mixture_;
  std::vector<std::vector<std::size_t>> rows_by_group_;
};

/// Row i of `queries` pairs with row i of `docs`. A batch holds distinct pairs.
class PairSampler {
 public:
  PairSampler(EncodedCorpus queries, EncodedCorpus docs);
  PairBatch batch(std::uint64_t seed, std::uint64_t step, std::size_t batch_size) const;
  std::size_t size() const noexcept { return queries_.size(); }

 private:
  EncodedCorpus queries_;
  EncodedCorpus docs_;
};

/// Single-producer bounded queue.
template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// False when the queue was closed while waiting.
  bool push(Item item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// nullopt once closed and drained.
  std::optional<Item> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    Item item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<Item> items_;
  bool closed_ = false;
  std::mutex mutex_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
};

/// Produces make(step) for step in [first, last) in order, optionally on a
/// background thread feeding a bounded queue. Exceptions thrown by `make` are
/// rethrown from `next`.
template <typename Batch>
class Prefetcher {
 public:
  Prefetcher(std::function<Batch(std::uint64_t)> make, std::uint64_t first, std::uint64_t last,
             std::size_t capacity, bool background)
      : make_(std::move(make)), next_step_(first), last_(last), queue_(capacity) {
    if (!background) return;
    worker_ = std::jthread([this, first](std::stop_token stop) {
      for (std::uint64_t s = first; s < last_ && !stop.stop_requested(); ++s) {
        Slot slot;
        try {
          slot.batch = make_(s);
        } catch (...) {
          slot.error = std::current_exception();
        }
        const bool failed = slot.error != nullptr;
        if (!queue_.push(std::move(slot)) || failed) break;
      }
      queue_.close();
    });
  }

  ~Prefetcher() {
    if (worker_.joinable()) {
      worker_.request_stop();
      queue_.close();
    }
  }

  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  Batch next() {
    if (next_step_ >= last_) throw std::out_of_range("prefetcher exhausted");
    if (!worker_.joinable()) return make_(next_step_++);
    auto slot = queue_.pop();
    if (!slot) throw std::out_of_range("prefetcher exhausted");
    ++next_step_;
    if (slot->error) std::rethrow_exception(slot->error);
    return std::move(*slot->batch);
  }

 private:
  struct Slot {
    std::optional<Batch> batch;
    std::exception_ptr error;
  };

  std::function<Batch(std::uint64_t)> make_;
  std::uint64_t next_step_;
  std::uint64_t last_;
  BoundedQueue<Slot> queue_;
  std::jthread worker_;
};

}  // namespace m3
