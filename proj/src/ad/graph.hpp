#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ad/tensor.hpp"

namespace se3ctrl::ad {

// Define-by-run reverse-mode tape. Nodes are appended in execution order and
// visited strictly in reverse id order on the backward pass, which makes
// gradient accumulation order (and therefore the trained bits) deterministic.
//
// Every node value is checked for NaN/inf on creation so numerical blowups
// surface at the op that produced them instead of three layers later.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first touch
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void(Graph&)> backward;
    const char* tag = "node";
  };

  int add(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> bwd = {},
          const char* tag = "node") {
    for (const T& v : value.data) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw std::runtime_error(std::string("non-finite value produced by '") + tag + "'");
      }
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = requires_grad ? std::move(bwd) : std::function<void(Graph&)>{};
    n.tag = tag;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int constant(Tensor<T> value, const char* tag = "const") {
    return add(std::move(value), false, {}, tag);
  }

  const Tensor<T>& val(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  Tensor<T>& val(int id) { return nodes_.at(static_cast<size_t>(id)).value; }

  bool needs_grad(int id) const { return nodes_.at(static_cast<size_t>(id)).requires_grad; }

  // Gradient buffer, zero-initialized on first access.
  Tensor<T>& grad(int id) {
    Node& n = nodes_.at(static_cast<size_t>(id));
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_.at(static_cast<size_t>(id)).grad_live; }

  void backward(int root) {
    if (val(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!needs_grad(root)) throw std::invalid_argument("backward: root does not require grad");
    grad(root).data[0] = T(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad_live && n.backward) n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace se3ctrl::ad
