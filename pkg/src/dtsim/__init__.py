"""dtsim: simulate the performance of distributed DNN training strategies.

Pipeline: load a layer-graph model, attach a hierarchical parallelization
strategy, compile to a device-placed execution graph, annotate costs, and
run the event simulator to get iteration time, per-device peak memory and
OOM verdicts.
"""

from .cluster import (
    ChannelSet,
    ClusterSpec,
    channels,
    cluster_from_dict,
    load_cluster,
    lowest_common_level,
    shared_links,
)
from .collective import (
    CommPlan,
    CommStep,
    PlacementLayout,
    implied_layout,
    infer_transform,
    layout_of,
    plan_volume,
    verify_plan,
)
from .compiler import (
    ExecutionGraph,
    ExecSubgraph,
    Stage,
    TaskNode,
    compile_graph,
    divide_subgraphs,
    split_operator,
)
from .costs import (
    ComputeCostTable,
    annotate_costs,
    collective_cost,
    compute_cost,
    cost_table_from_obj,
    load_corrections,
    load_cost_table,
)
from .errors import (
    CompileError,
    CostError,
    DtsimError,
    SchemaError,
    SimulationDeadlock,
    StrategyError,
)
from .ir import (
    ModelGraph,
    derive_backward,
    load_model,
    model_from_dict,
    validate_graph,
)
from .simulator import (
    MemoryTracker,
    SchedulerState,
    SimReport,
    predict_oom,
    select_next_subgraph,
    simulate,
    to_chrome_trace,
)
from .strategy import (
    ComputationConfig,
    MemoryConfig,
    ParallelConfig,
    ScheduleConfig,
    StrategyTree,
    construct_tree,
    dev_group,
    dump_strategy,
    load_strategy,
    propagate,
    strategy_from_dict,
    validate_strategy,
)

__version__ = "0.1.0"
