#pragma once

#include "ceglab/errors.hpp"
#include "ceglab/tensor.hpp"
#include "ceglab/kernels.hpp"
#include "ceglab/autodiff.hpp"
#include "ceglab/attention.hpp"
#include "ceglab/rope.hpp"
#include "ceglab/grad_check.hpp"
#include "ceglab/config.hpp"
#include "ceglab/model.hpp"
#include "ceglab/data.hpp"
#include "ceglab/optim.hpp"
#include "ceglab/run_log.hpp"
#include "ceglab/checkpoint.hpp"
#include "ceglab/trainer.hpp"
#include "ceglab/ceg.hpp"
#include "ceglab/report.hpp"
#include "ceglab/experiment.hpp"
#include "ceglab/verify.hpp"
