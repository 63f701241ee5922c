#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xphase/tensor.hpp"

namespace xphase {

struct ModelConfig {
  std::int64_t n_phases = 4;
  std::int64_t base_channels = 8;
  std::int64_t n_classes = 5;
  double lambda = 0.1;  // residual attention weight
  double alpha = 0.7;   // low/high prediction blend
  double beta = 0.1;    // high-scale loss weight
  std::int64_t height = 16, width = 16, depth = 8;

  // Ablation switches; the full model keeps every one at its default.
  bool use_high_scale = true;
  bool use_phase_embedding = true;

  // Phase embeddings are drawn with std sqrt(width) by default; the
  // inv_sqrt alternative (1/sqrt(width)) is selectable since the large
  // default looks like it could be a typo upstream.
  bool phase_embed_std_sqrt = true;

  double leaky_slope = 0.01;
  double norm_eps = 1e-5;

  void validate() const;  // throws std::invalid_argument
};

struct ConvLayer {
  TensorPtr weight;  // [Cout,Cin,3,3,3]
  TensorPtr bias;    // [Cout]
};

struct NormLayer {
  TensorPtr gamma, beta;  // [C]
};

struct FcLayer {
  TensorPtr weight;  // [out,in]
  TensorPtr bias;    // [out]
};

// One of the three shared encoders (query/key/value path). The first two
// stride-1 convs produce the low-level features; the stride-2 conv plus one
// more stride-1 conv produce the high-level features at half resolution and
// doubled width.
struct EncoderPath {
  ConvLayer conv1, conv2, conv3, conv4;
  NormLayer norm1, norm2, norm3, norm4;
};

struct Ffn {
  FcLayer fc1, fc2, fc3;
};

struct ModelParams {
  EncoderPath query_path, key_path, value_path;
  TensorPtr phase_embed_low;   // [N, C]
  TensorPtr phase_embed_high;  // [N, 2C]
  Ffn ffn_low, ffn_high;

  // Stable, checkpoint-defining iteration order.
  std::vector<std::pair<std::string, TensorPtr>> named() const;
  std::int64_t total_count() const;
};

// Expected parameter count given that one weight set per path serves all
// phases.
std::int64_t shared_weights_param_count(const ModelConfig& cfg);

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// One multi-phase case ready for the model: N single-channel volumes plus a
// binary lesion mask shared by all phases.
struct VolumeCase {
  std::int64_t h = 0, w = 0, d = 0;
  std::vector<std::vector<double>> volumes;  // N buffers of h*w*d
  std::vector<double> mask;                  // h*w*d of {0,1}
};

// Eq-style per-channel mean of `feature` restricted to mask voxels.
// feature: [H,W,D,C], mask: [H,W,D] constant. Differentiable w.r.t. feature.
// Throws EmptyMaskError when the mask has no nonzero voxel.
TensorPtr masked_average_pool(const TensorPtr& feature, const TensorPtr& mask);

// 2x2x2 block max: any lesion voxel marks the coarse voxel. Requires even
// extents.
TensorPtr downsample_mask(const TensorPtr& mask);

struct AttentionOutput {
  TensorPtr f_out;  // [N, C']
  TensorPtr attn;   // [N, N], row-stochastic
};

// A = softmax(Q K^T / sqrt(C')), F_out = lambda * A V + V. The scaling uses
// the width of the embeddings actually passed in.
AttentionOutput cross_phase_attention(const TensorPtr& q, const TensorPtr& k,
                                      const TensorPtr& v, double lambda);

// Lesion embeddings of a single phase, before and after adding that phase's
// embedding row.
struct LesionEmbedding {
  TensorPtr pooled_q_low, pooled_k_low, pooled_v_low;     // [C]
  TensorPtr pooled_q_high, pooled_k_high, pooled_v_high;  // [2C]
  TensorPtr q_low, k_low, v_low;                          // pooled + P_i
  TensorPtr q_high, k_high, v_high;
};

LesionEmbedding embed_lesion_features(const TensorPtr& volume,
                                      const TensorPtr& mask,
                                      std::int64_t phase_index,
                                      const ModelParams& params,
                                      const ModelConfig& cfg);

struct AttentionRecord {
  std::string case_id;
  std::int64_t n = 0;
  std::vector<double> a_low;   // N*N row-major
  std::vector<double> a_high;  // empty when the high scale is disabled
};

struct CasePrediction {
  std::vector<double> y_low, y_high, y_final;
  int predicted = 0;
};

struct ForwardResult {
  CasePrediction prediction;
  AttentionRecord attention;
  TensorPtr logits_low, logits_high;  // graph handles for the loss
  TensorPtr f_out_low, f_out_high;    // [N, C'] fused features
};

ForwardResult forward(const VolumeCase& vc, const ModelParams& params,
                      const ModelConfig& cfg);

// L = CE(logits_low, label) + beta * CE(logits_high, label), differentiable
// w.r.t. every parameter.
TensorPtr model_loss(const ForwardResult& fr, std::int64_t label,
                     const ModelConfig& cfg);

int predict_class(const std::vector<double>& y_final);

// Checkpoint file: one JSON manifest line naming every tensor with shape and
// byte offset, then raw little-endian f64 payload in manifest order.
void save_checkpoint(const std::string& path, const ModelParams& params);
void load_checkpoint(const std::string& path, ModelParams& params);

}  // namespace xphase
