#pragma once

#include "kpat/error.hpp"
#include "kpat/numerics.hpp"
#include "kpat/problems.hpp"
#include "kpat/models.hpp"
#include "kpat/io.hpp"
#include "kpat/training.hpp"
#include "kpat/theory.hpp"
#include "kpat/probes.hpp"
#include "kpat/mnist.hpp"
#include "kpat/experiments.hpp"
#include "kpat/verification.hpp"
