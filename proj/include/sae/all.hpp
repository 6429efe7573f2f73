#pragma once

#include "sae/activation_store.hpp"
#include "sae/branch_analysis.hpp"
#include "sae/circuits.hpp"
#include "sae/common.hpp"
#include "sae/dataset_examples.hpp"
#include "sae/embedding.hpp"
#include "sae/sae.hpp"
#include "sae/toy.hpp"
