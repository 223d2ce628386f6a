#pragma once
// Umbrella header.

#include "scm/corrfield.hpp"
#include "scm/encoders.hpp"
#include "scm/gradcheck.hpp"
#include "scm/gradsuite.hpp"
#include "scm/image_io.hpp"
#include "scm/inference.hpp"
#include "scm/losses.hpp"
#include "scm/model.hpp"
#include "scm/ops.hpp"
#include "scm/synthfig.hpp"
#include "scm/tensor.hpp"
#include "scm/trainer.hpp"
#include "scm/translator.hpp"
