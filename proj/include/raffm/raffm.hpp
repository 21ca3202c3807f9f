#pragma once

#include "raffm/checkpoint.hpp"
#include "raffm/data.hpp"
#include "raffm/error.hpp"
#include "raffm/fed.hpp"
#include "raffm/nn.hpp"
#include "raffm/rng.hpp"
#include "raffm/scaling.hpp"
#include "raffm/tensor.hpp"
