#pragma once
// FIFO transition store with episode-boundary-aware window sampling.
//
// Each row holds (obs, action-that-led-in, reward, continue). The action
// column of a reset row is all-zero and its reward is 0; rows keep their
// true previous action otherwise, so windows that start mid-episode feed
// the recurrent model the right conditioning. Rows carry a monotone
// episode id that advances after every continue==0 row; a window of
// length T is valid iff its first and last rows share an id, which (ids
// being monotone) pins the whole window inside one episode. The
// continue==0 row is the last row of its episode, so windows may end on a
// terminal but never straddle one.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hwm/rng.hpp"
#include "hwm/serial.hpp"

namespace hwm {

// Sampled training windows, time-major like SequenceBatch: row (t, b) is
// t * batch + b. `starts` records each window's logical start row for
// diagnostics.
struct EpisodeBatch {
  std::size_t batch = 0, time = 0;
  std::size_t obs_dim = 0, action_dim = 0;
  std::vector<float> obs;       // [time*batch, obs_dim]
  std::vector<double> actions;  // [time*batch, action_dim]
  std::vector<double> rewards;  // [time*batch]
  std::vector<double> continues;
  std::vector<std::size_t> starts;  // [batch]
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim)
      : capacity_(capacity), obs_dim_(obs_dim), action_dim_(action_dim) {
    if (!capacity_ || !obs_dim_ || !action_dim_)
      throw std::invalid_argument("ReplayBuffer: capacity and dims must be positive");
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::uint64_t total_pushed() const { return total_pushed_; }

  void push(std::span<const float> obs, std::span<const double> action, double reward,
            double cont) {
    if (obs.size() != obs_dim_)
      throw std::invalid_argument("ReplayBuffer::push: obs has " + std::to_string(obs.size()) +
                                  " values, expected " + std::to_string(obs_dim_));
    if (action.size() != action_dim_)
      throw std::invalid_argument("ReplayBuffer::push: action has " +
                                  std::to_string(action.size()) + " values, expected " +
                                  std::to_string(action_dim_));
    std::size_t slot;
    if (size_ == capacity_) {
      slot = start_;  // overwrite the oldest row
      start_ = (start_ + 1) % capacity_;
    } else {
      slot = size_;  // start_ stays 0 until the ring first fills
      obs_.resize(obs_.size() + obs_dim_);
      actions_.resize(actions_.size() + action_dim_);
      rewards_.push_back(0.0);
      conts_.push_back(0.0);
      episodes_.push_back(0);
      ++size_;
    }
    std::copy(obs.begin(), obs.end(), obs_.begin() + static_cast<std::ptrdiff_t>(slot * obs_dim_));
    std::copy(action.begin(), action.end(),
              actions_.begin() + static_cast<std::ptrdiff_t>(slot * action_dim_));
    rewards_[slot] = reward;
    conts_[slot] = cont;
    episodes_[slot] = episode_counter_;
    if (cont == 0.0) ++episode_counter_;
    ++total_pushed_;
  }

  // Logical accessors; index 0 is the oldest stored row.
  std::span<const float> obs_at(std::size_t i) const {
    return {obs_.data() + phys(i) * obs_dim_, obs_dim_};
  }
  std::span<const double> action_at(std::size_t i) const {
    return {actions_.data() + phys(i) * action_dim_, action_dim_};
  }
  double reward_at(std::size_t i) const { return rewards_[phys(i)]; }
  double cont_at(std::size_t i) const { return conts_[phys(i)]; }
  std::uint64_t episode_at(std::size_t i) const { return episodes_[phys(i)]; }

  std::vector<std::size_t> valid_starts(std::size_t window) const {
    if (window == 0) throw std::invalid_argument("ReplayBuffer::valid_starts: window must be > 0");
    std::vector<std::size_t> out;
    if (size_ < window) return out;
    for (std::size_t i = 0; i + window <= size_; ++i)
      if (episode_at(i) == episode_at(i + window - 1)) out.push_back(i);
    return out;
  }

  bool ready(std::size_t window) const { return !valid_starts(window).empty(); }

  // Uniform over valid starts, windows drawn independently (with
  // replacement across the batch).
  EpisodeBatch sample(std::size_t batch, std::size_t window, Rng& rng) const {
    if (batch == 0) throw std::invalid_argument("ReplayBuffer::sample: batch must be > 0");
    const auto starts = valid_starts(window);
    if (starts.empty())
      throw std::runtime_error("ReplayBuffer::sample: no window of length " +
                               std::to_string(window) + " available yet (" +
                               std::to_string(size_) + " rows stored)");
    EpisodeBatch out;
    out.batch = batch;
    out.time = window;
    out.obs_dim = obs_dim_;
    out.action_dim = action_dim_;
    const std::size_t rows = batch * window;
    out.obs.resize(rows * obs_dim_);
    out.actions.resize(rows * action_dim_);
    out.rewards.resize(rows);
    out.continues.resize(rows);
    out.starts.resize(batch);
    for (std::size_t b = 0; b < batch; ++b)
      out.starts[b] = starts[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(starts.size())))];
    for (std::size_t t = 0; t < window; ++t)
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t src = out.starts[b] + t;
        const std::size_t dst = t * batch + b;
        const auto o = obs_at(src);
        std::copy(o.begin(), o.end(), out.obs.begin() + static_cast<std::ptrdiff_t>(dst * obs_dim_));
        const auto a = action_at(src);
        std::copy(a.begin(), a.end(),
                  out.actions.begin() + static_cast<std::ptrdiff_t>(dst * action_dim_));
        out.rewards[dst] = reward_at(src);
        out.continues[dst] = cont_at(src);
      }
    return out;
  }

  // Physical ring state is serialized as-is so save -> load -> save is
  // byte-identical.
  void save(std::ostream& os) const {
    os.write(kMagic, 8);
    serial::write_pod<std::uint64_t>(os, capacity_);
    serial::write_pod<std::uint64_t>(os, obs_dim_);
    serial::write_pod<std::uint64_t>(os, action_dim_);
    serial::write_pod<std::uint64_t>(os, start_);
    serial::write_pod<std::uint64_t>(os, size_);
    serial::write_pod<std::uint64_t>(os, episode_counter_);
    serial::write_pod<std::uint64_t>(os, total_pushed_);
    serial::write_vec(os, obs_);
    serial::write_vec(os, actions_);
    serial::write_vec(os, rewards_);
    serial::write_vec(os, conts_);
    serial::write_vec(os, episodes_);
  }

  void load(std::istream& is) {
    char magic[8] = {};
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kMagic, 8))
      throw std::runtime_error("ReplayBuffer::load: bad magic");
    const auto cap = serial::read_pod<std::uint64_t>(is);
    const auto od = serial::read_pod<std::uint64_t>(is);
    const auto ad = serial::read_pod<std::uint64_t>(is);
    if (cap != capacity_ || od != obs_dim_ || ad != action_dim_)
      throw std::runtime_error("ReplayBuffer::load: stored shape (capacity " + std::to_string(cap) +
                               ", obs " + std::to_string(od) + ", action " + std::to_string(ad) +
                               ") does not match this buffer (capacity " +
                               std::to_string(capacity_) + ", obs " + std::to_string(obs_dim_) +
                               ", action " + std::to_string(action_dim_) + ")");
    start_ = static_cast<std::size_t>(serial::read_pod<std::uint64_t>(is));
    size_ = static_cast<std::size_t>(serial::read_pod<std::uint64_t>(is));
    episode_counter_ = serial::read_pod<std::uint64_t>(is);
    total_pushed_ = serial::read_pod<std::uint64_t>(is);
    obs_ = serial::read_vec<float>(is);
    actions_ = serial::read_vec<double>(is);
    rewards_ = serial::read_vec<double>(is);
    conts_ = serial::read_vec<double>(is);
    episodes_ = serial::read_vec<std::uint64_t>(is);
    if (rewards_.size() != size_ || conts_.size() != size_ || episodes_.size() != size_ ||
        obs_.size() != size_ * obs_dim_ || actions_.size() != size_ * action_dim_)
      throw std::runtime_error("ReplayBuffer::load: inconsistent array lengths");
    if (size_ > capacity_ || start_ >= capacity_ || (size_ < capacity_ && start_ != 0))
      throw std::runtime_error("ReplayBuffer::load: inconsistent ring indices");
  }

 private:
  static constexpr const char kMagic[9] = "HWMRBUF1";

  std::size_t phys(std::size_t i) const {
    if (i >= size_) throw std::out_of_range("ReplayBuffer: row " + std::to_string(i));
    return (start_ + i) % capacity_;
  }

  std::size_t capacity_, obs_dim_, action_dim_;
  std::size_t start_ = 0, size_ = 0;
  std::uint64_t episode_counter_ = 0;  // id the next pushed row will take
  std::uint64_t total_pushed_ = 0;
  std::vector<float> obs_;
  std::vector<double> actions_;
  std::vector<double> rewards_;
  std::vector<double> conts_;
  std::vector<std::uint64_t> episodes_;
};

}  // namespace hwm
