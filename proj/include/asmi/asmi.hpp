#pragma once

#include "asmi/errors.hpp"
#include "asmi/geometry.hpp"
#include "asmi/cost_model.hpp"
#include "asmi/ledger.hpp"
#include "asmi/page_tables.hpp"
#include "asmi/promem.hpp"
#include "asmi/vtlb.hpp"
#include "asmi/iommu.hpp"
#include "asmi/hyperwall.hpp"
#include "asmi/trace.hpp"
#include "asmi/metrics.hpp"
#include "asmi/engine.hpp"
#include "asmi/workload.hpp"
#include "asmi/config.hpp"
