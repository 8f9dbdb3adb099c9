#pragma once

#include "hypervae/checkpoint.hpp"
#include "hypervae/commands.hpp"
#include "hypervae/config.hpp"
#include "hypervae/dataset.hpp"
#include "hypervae/discovery.hpp"
#include "hypervae/error.hpp"
#include "hypervae/evaluation.hpp"
#include "hypervae/gaussian.hpp"
#include "hypervae/gp.hpp"
#include "hypervae/gradcheck.hpp"
#include "hypervae/gradcheck_suite.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/io.hpp"
#include "hypervae/layers.hpp"
#include "hypervae/layout.hpp"
#include "hypervae/mdl.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/tensor.hpp"
#include "hypervae/training.hpp"
#include "hypervae/vae.hpp"
