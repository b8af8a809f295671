"""Block-distributed dense linear algebra on a simulated worker grid."""
from .core import (MASTER, BlockBuffer, BlockGrid, LayoutError, LayoutKind, LayoutSpec,
                   MatrixDescriptor, Precision, Provenance, block_extent, make_layout, owner_of)
from .transport import CostModel, Medium, Topology, TransferRecord, modeled_time
from .runtime import (DatasetConfig, EndOfData, Session, checkpoint, create_matrix, dataset_batch,
                      destroy_matrix, gather, init, prefetch_next_batch, register_dataset, restore,
                      scatter, seed_workers, shutdown, write_block)
from .dist_ops import (CacheMissError, add_row_col_sum, broadcast_gemm_reference,
                       cached_backward_gemm, cyclic_gemm, general_gemm, read_replica, replicate,
                       reshape, set_caching)

__all__ = [name for name in dir() if not name.startswith("_")]
