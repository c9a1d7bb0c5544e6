#pragma once

#include "ontoext/bpe.hpp"
#include "ontoext/config.hpp"
#include "ontoext/dataset.hpp"
#include "ontoext/error.hpp"
#include "ontoext/evaluation.hpp"
#include "ontoext/explain.hpp"
#include "ontoext/extension.hpp"
#include "ontoext/kernels.hpp"
#include "ontoext/metrics.hpp"
#include "ontoext/model.hpp"
#include "ontoext/ontology.hpp"
#include "ontoext/synthetic.hpp"
#include "ontoext/training.hpp"
#include "ontoext/util.hpp"
