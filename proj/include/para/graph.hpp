#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "para/tensor.hpp"

namespace para {

// Fixed op set covering the part VAE and the reconstruction losses.
enum class OpKind {
    Input,
    Param,
    Linear,           // x [..,in] @ W [in,out] + b [out]
    PointwiseLinear,  // shared linear over points, x [B,N,Cin] -> [B,N,Cout]
    LeakyRelu,
    BatchNorm,        // over last-dim channels, running stats + momentum
    MaxPoolPoints,    // x [B,N,C] -> [B,C], per-feature max over points
    Reshape,
    Add,              // elementwise, same shape
    Mul,              // elementwise, same shape
    Scale,            // y = c * x
    Exp,
    Sum,              // reduce all -> scalar
    Concat,           // point clouds [Ni,3] -> [sum Ni,3]
    Chamfer,          // ([N,3],[M,3]) or batched ([B,N,3],[B,M,3]) -> scalar
    RigidTransform,   // (points [N,3], t [3], r [1]) -> [N,3], yaw about +y
    Reflect,          // Householder reflection across a fixed plane
    OverlapPenalty,   // ([N,3],[M,3]) -> scalar, mean hinge below tau
    KlDiag,           // (mu [B,C], logvar [B,C]) -> scalar, mean KL to N(0,I)
};

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Node {
    OpKind kind;
    std::string name;
    std::vector<int> args;
    std::vector<int64_t> out_shape;

    // op attributes
    double slope = 0.0;     // LeakyRelu
    double scale = 1.0;     // Scale
    double tau = 0.0;       // OverlapPenalty
    double momentum = 0.1;  // BatchNorm
    double eps = 1e-5;      // BatchNorm
    double plane_point[3] = {0, 0, 0};
    double plane_normal[3] = {1, 0, 0};

    // state
    Tensor value;          // Param: the parameter itself; others: last forward value
    Tensor grad;           // accumulated during backward
    bool requires_grad = false;  // Inputs marked differentiable
    bool has_input = false;      // Input was set since construction

    // BatchNorm persistent state
    Tensor running_mean, running_var;
    // saved forward intermediates
    Tensor saved_mean, saved_invstd, saved_xhat;
    std::vector<int64_t> saved_idx;  // MaxPool argmax / Chamfer argmins
    std::vector<int64_t> saved_idx2;
};

// A static computation graph over the fixed op set. Nodes are appended in
// topological order; shapes are checked at construction time. Values of
// Input nodes are set per run; Param nodes own their tensors across runs.
class Graph {
  public:
    int input(std::string name, std::vector<int64_t> shape, bool requires_grad = false);
    int param(std::string name, Tensor init);

    int linear(std::string name, int x, int w, int b);
    int pointwise_linear(std::string name, int x, int w, int b);
    int leaky_relu(int x, double slope = 0.01);
    int batchnorm(std::string name, int x, int gamma, int beta, double momentum = 0.1,
                  double eps = 1e-5);
    int maxpool_points(int x);
    int reshape(int x, std::vector<int64_t> shape);
    int add(int a, int b);
    int mul(int a, int b);
    int scale(int x, double c);
    int exp(int x);
    int sum(int x);
    int concat(std::vector<int> clouds);
    int chamfer(int a, int b);
    int rigid_transform(int points, int t, int r);
    int reflect(int points, const double* plane_point, const double* plane_normal);
    int overlap_penalty(int a, int b, double tau);
    int kl_diag(int mu, int logvar);

    void set_input(int id, const Tensor& v);
    void set_input(const std::string& name, const Tensor& v);
    int find(const std::string& name) const;  // -1 when absent

    void set_training(bool training) { training_ = training; }
    bool training() const { return training_; }

    void forward();
    // Reverse-mode gradients of a scalar seed w.r.t. all params and all
    // differentiable inputs. Requires a forward() on this graph first.
    void backward(int seed);

    const Tensor& value(int id) const { return nodes_[id].value; }
    const Tensor& grad(int id) const { return nodes_[id].grad; }
    Tensor& param_value(int id);
    Node& node(int id) { return nodes_[id]; }
    const Node& node(int id) const { return nodes_[id]; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }
    std::vector<int> param_ids() const;

  private:
    int push(Node n);
    void forward_node(Node& n);
    void backward_node(Node& n);
    void check_arg(int id) const;

    std::vector<Node> nodes_;
    bool training_ = false;
    bool forward_done_ = false;
};

// Central-difference gradient estimate, one coordinate at a time.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h);

}  // namespace para
