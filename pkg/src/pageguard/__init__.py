"""Safe non-blocking zero-copy sends.

In-flight send buffers are write-protected with the MMU; a writer that touches
one blocks inside the fault handler until the send completes, then its write
proceeds.  Small messages are copied instead.
"""

from .errors import (
    DuplicateOpError,
    GuardInitError,
    IncompleteHandle,
    MessageTooLarge,
    OpInFlightError,
    PageGuardError,
    ProtectionError,
    RegistryFull,
    StaleHandle,
    TransportClosed,
    TransportError,
    UnknownDestination,
    UnknownOpError,
)
from .guard import (
    FaultEvent,
    FaultKind,
    FaultLog,
    GuardConfig,
    MemoryGuard,
    PageGeometry,
    align_to_pages,
    alloc_pages,
    default_guard,
    install_fault_handler,
    protect_read_only,
    unprotect,
)
from .registry import (
    PAGE_SIZE,
    BufferDesc,
    GuardedOp,
    ManualCompletion,
    OpState,
    PageRange,
    RegionRegistry,
)
from .send import GuardedSender, GuardStats, PendingSet, SendMode, SendPolicy, SendToken
from .transport import (
    ANY_SOURCE,
    ANY_TAG,
    Comm,
    CompletionHandle,
    CorruptionReport,
    DmaConfig,
    LoopbackTransport,
    SimulatedDMA,
    Status,
    fnv1a64,
)

__version__ = "0.1.0"
