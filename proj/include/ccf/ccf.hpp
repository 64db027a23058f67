#pragma once

#include "ccf/concept_bank.hpp"
#include "ccf/ebf.hpp"
#include "ccf/error.hpp"
#include "ccf/eval.hpp"
#include "ccf/io.hpp"
#include "ccf/matrix.hpp"
#include "ccf/mlp.hpp"
#include "ccf/perturbation.hpp"
#include "ccf/projector.hpp"
#include "ccf/projector_train.hpp"
#include "ccf/rng.hpp"
#include "ccf/synth.hpp"
