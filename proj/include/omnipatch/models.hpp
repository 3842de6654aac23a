#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "omnipatch/data.hpp"
#include "omnipatch/tensor.hpp"

namespace omnipatch {

enum class ModelFamily { vit, cnn };

std::string to_string(ModelFamily f);

// Output of one forward pass. Logits are always returned at the resolution of
// the input image (models that compute at a downscaled internal resolution
// upsample bilinearly before returning), so losses always see the label grid.
struct ModelOutput {
    Tensor logits;  // C x H x W, input resolution
    std::vector<ScalarMap> attention;  // per layer, T x T row-stochastic; empty for CNNs
    int token_grid_h = 0, token_grid_w = 0;  // token layout behind the attention maps
    int internal_h = 0, internal_w = 0;      // resolution the network actually ran at
    double output_scale = 1.0;  // ratio of returned logits dims to input dims (1 here)

    Tensor probabilities() const { return softmax(logits); }
};

// Gradient seeds for a backward pass. Either pointer may be null.
struct BackwardSeed {
    const Tensor* dlogits = nullptr;               // w.r.t. returned logits (input res)
    const std::vector<ScalarMap>* dattention = nullptr;  // w.r.t. exposed attention maps
};

// One differentiable evaluation: holds the activation cache needed to run the
// backward pass for the image it was created with.
class ForwardPass {
public:
    virtual ~ForwardPass() = default;
    virtual const ModelOutput& output() const = 0;
    // Gradient of the seeded scalar w.r.t. the input image (3 x H x W).
    virtual Tensor backward(const BackwardSeed& seed) const = 0;
};

// Uniform handle over segmentation models. Immutable after construction
// (pretrain() excepted, which is only legal before a handle is shared);
// forward passes are const and safe to run concurrently.
class Surrogate {
public:
    virtual ~Surrogate() = default;

    const std::string& name() const { return name_; }
    ModelFamily family() const { return family_; }
    double input_downscale() const { return downscale_; }
    int num_classes() const { return num_classes_; }

    virtual ModelOutput forward(const Tensor& image) const;
    virtual std::unique_ptr<ForwardPass> forward_with_grad(const Tensor& image) const = 0;

    // Optional short supervised warm-up on a desk dataset. Deterministic for a
    // given seed. Only toy models support it.
    virtual void pretrain(const std::vector<SegmentationSample>& samples, int epochs, double lr,
                          uint64_t seed);

    // Serializes architecture + weights so make_external_adapter can reload
    // the model behind the adapter interface.
    virtual void save_weights(const std::filesystem::path& path) const;

protected:
    Surrogate(std::string name, ModelFamily family, double downscale, int num_classes);

    std::string name_;
    ModelFamily family_;
    double downscale_;
    int num_classes_;
};

using SurrogateHandle = std::shared_ptr<const Surrogate>;

// Small seeded encoder-decoder convolutional segmenter. Forward output
// resolution equals input resolution; differentiable w.r.t. the input.
std::shared_ptr<Surrogate> make_toy_cnn(int channels, int num_classes, uint64_t seed,
                                        double downscale = 1.0);

// Small tokenizing transformer segmenter exposing one attention map per
// layer. Internal dimensions (after downscale) must be divisible by the token
// size; logits are upsampled back to input resolution.
std::shared_ptr<Surrogate> make_toy_vit(int patch_token_size, int layers, int num_classes,
                                        uint64_t seed, double downscale = 1.0, int embed_dim = 48);

// Preprocessing declared by an external-model adapter config.
struct AdapterPreproc {
    double downscale = 1.0;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
};

// Wraps a serialized model behind the SurrogateHandle contract: input is
// resized by `downscale` and normalized before the wrapped forward, logits
// are re-upsampled to the original resolution. The declared family must match
// the loaded architecture's attention capability.
std::shared_ptr<Surrogate> make_external_adapter(const std::filesystem::path& weights_path,
                                                 ModelFamily family, const AdapterPreproc& pre);

// Reads an adapter config file (JSON: architecture name, weight path,
// downscale, normalization mean/std) and builds the adapter.
std::shared_ptr<Surrogate> load_adapter_config(const std::filesystem::path& config_path);

}  // namespace omnipatch
