#pragma once

#include "da/tape.hpp"

namespace da::ops {

/// Gradient reversal: identity in the forward pass, multiplies the incoming
/// gradient by -scale in the backward pass. Inserted between a feature
/// extractor and a domain discriminator it turns plain gradient descent into
/// min-max adversarial training: the discriminator still receives its true
/// gradient while everything upstream receives the reversed, scaled one.
Var gradient_reversal(Var x, double scale);

}  // namespace da::ops
