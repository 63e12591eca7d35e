"""Grid-distributed Monte Carlo CVA with rating-aware credit scenarios."""
from __future__ import annotations

__version__ = "0.1.0"

from .scenarios import (FactorModel, HullWhiteParams, MarketScenarioSet, TimeGrid, ZeroCurve,
                        build_time_grid, generate_market_scenarios)
from .credit import (CreditEntity, CreditScenarioSet, PDTermStructure, TransitionMatrix,
                     calibrate_entity, generate_credit_scenarios, risk_neutralize_matrix)
from .valuation import (BermudanSwaption, CashflowInstrument, SwapSpec, ValueCube,
                        value_bermudan_swaption, value_deal)
from .cva import (CSATerms, CVAResult, NettingSet, aggregate_cva, backward_cva, build_context,
                  forward_cva, incremental_cva)

__all__ = [
    "__version__", "FactorModel", "HullWhiteParams", "MarketScenarioSet", "TimeGrid", "ZeroCurve",
    "build_time_grid", "generate_market_scenarios", "CreditEntity", "CreditScenarioSet",
    "PDTermStructure", "TransitionMatrix", "calibrate_entity", "generate_credit_scenarios",
    "risk_neutralize_matrix", "BermudanSwaption", "CashflowInstrument", "SwapSpec", "ValueCube",
    "value_bermudan_swaption", "value_deal", "CSATerms", "CVAResult", "NettingSet", "aggregate_cva",
    "backward_cva", "build_context", "forward_cva", "incremental_cva",
]
