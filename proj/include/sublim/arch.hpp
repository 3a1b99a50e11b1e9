#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sublim/model.hpp"

namespace sublim {

/// Which logit layout a model is built for.
/// aux: 10 MNIST + 6 auxiliary logits. task: 10 MNIST + 10 Fashion-MNIST logits.
enum class Channel { aux, task };

enum class Arch { qnn, mlp, cnn };

std::string to_string(Channel c);
std::string to_string(Arch a);
Channel channel_from_string(const std::string& s);
Arch arch_from_string(const std::string& s);

/// Architecture description from which a Model is built. Only the fields of
/// the selected arch are meaningful.
struct ModelConfig {
    Arch arch = Arch::mlp;
    Channel channel = Channel::task;
    int depth = 4;                        // qnn brickwork blocks
    std::vector<std::size_t> hidden{4};   // mlp hidden widths
    std::size_t filters = 1;              // cnn

    void validate() const;
    [[nodiscard]] std::string describe() const;
    bool operator==(const ModelConfig&) const = default;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg);

}  // namespace sublim
