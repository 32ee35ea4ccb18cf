"""Float-operation accounting for the inference path.

Inference-path code that performs real-valued arithmetic (the embedding
setup, the final logit scaling) calls :func:`note_float_ops` with the
number of operations it executed; the integer kernels never do.  The
executor snapshots the counter after the pixel embedding and after the
final conv, so the reported delta is a runtime witness that the core ran
no float math.  Offline stages (compiler, oracle) are deliberately not
instrumented: they are free to use reals.

The counter is process-global and not synchronized; it is meant for
single-threaded verification runs, not precise profiling.
"""

_float_ops = 0


def note_float_ops(n: int) -> None:
    global _float_ops
    _float_ops += int(n)


def float_op_count() -> int:
    return _float_ops


def reset_float_ops() -> None:
    global _float_ops
    _float_ops = 0
