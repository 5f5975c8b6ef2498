#pragma once

/**
 * bounded_queue.hpp - Blocking multi-producer multi-consumer FIFO with a hard
 * capacity. Producers block while full, consumers while empty. close() lets
 * consumers drain what remains; abort() wakes everyone and fails fast.
 */

#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>

#include "featdrive/common.hpp"

namespace featdrive::pipeline {

template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
        FD_CHECK_MSG(capacity >= 1, "queue capacity must be >= 1");
    }

    /// Blocks while full. Returns false if the queue was closed or aborted.
    bool push(T value) {
        {
            std::unique_lock lk(mu_);
            not_full_.wait(lk, [&] { return items_.size() < capacity_ || closed_ || aborted_; });
            if (closed_ || aborted_) return false;
            items_.push_back(std::move(value));
        }
        not_empty_.notify_one();
        return true;
    }

    /// Blocks while empty. Returns nullopt once closed and drained, or on abort.
    std::optional<T> pop() {
        std::unique_lock lk(mu_);
        not_empty_.wait(lk, [&] { return !items_.empty() || closed_ || aborted_; });
        if (aborted_ || (items_.empty() && closed_)) return std::nullopt;
        T value = std::move(items_.front());
        items_.pop_front();
        lk.unlock();
        not_full_.notify_one();
        return value;
    }

    /// No further pushes; consumers drain the remainder.
    void close() {
        {
            std::lock_guard lk(mu_);
            closed_ = true;
        }
        not_empty_.notify_all();
        not_full_.notify_all();
    }

    /// Emergency stop: wakes everyone, drops queued items.
    void abort() {
        {
            std::lock_guard lk(mu_);
            aborted_ = true;
            items_.clear();
        }
        not_empty_.notify_all();
        not_full_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lk(mu_);
        return items_.size();
    }

    std::size_t capacity() const { return capacity_; }

    bool aborted() const {
        std::lock_guard lk(mu_);
        return aborted_;
    }

private:
    const std::size_t capacity_;
    mutable std::mutex mu_;
    std::condition_variable not_full_;
    std::condition_variable not_empty_;
    std::deque<T> items_;
    bool closed_ = false;
    bool aborted_ = false;
};

}  // namespace featdrive::pipeline
