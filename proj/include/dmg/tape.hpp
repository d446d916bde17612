// Reverse-mode tape. Ops append one node per call in execution order;
// backward() replays the nodes in reverse and frees each node's output
// buffers as soon as its closure has run, so peak memory decays over the
// course of the sweep.
#pragma once

#include <functional>

#include "dmg/tensor.hpp"

namespace dmg {

template <class T>
class Tape {
public:
  void record(const Tensor<T>& out, std::function<void()> backward) {
    nodes_.push_back(Node{out.handle(), std::move(backward)});
  }

  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  // Leaf tensors (parameters, inputs flagged requires_grad) keep their
  // accumulated gradients; intermediate buffers are released.
  void backward(Tensor<T>& loss) {
    require(loss.numel() == 1, "backward() expects a scalar loss, got " + loss.shape().str());
    loss.grad()[0] = T(1);
    auto kept = loss.handle();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward();
      if (it->out != kept) it->out->release();
      it->backward = nullptr;
    }
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

private:
  struct Node {
    std::shared_ptr<TensorData<T>> out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace dmg
