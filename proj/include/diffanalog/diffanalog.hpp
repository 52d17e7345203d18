#pragma once

#include "diffanalog/common.hpp"
#include "diffanalog/expr.hpp"
#include "diffanalog/gradient.hpp"
#include "diffanalog/io.hpp"
#include "diffanalog/memory.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/model_io.hpp"
#include "diffanalog/optim.hpp"
#include "diffanalog/parallel.hpp"
#include "diffanalog/paradigm/cnn.hpp"
#include "diffanalog/paradigm/obc.hpp"
#include "diffanalog/paradigm/tln.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/relax.hpp"
#include "diffanalog/solver.hpp"
#include "diffanalog/trainables.hpp"
