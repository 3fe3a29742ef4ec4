"""Exception types shared across the package."""


class AsapError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(AsapError, ValueError):
    pass


class NumericFailure(AsapError, ArithmeticError):
    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} after {iterations} iterations")
        self.iterations = iterations


class ProtocolViolation(AsapError):
    """A worker broke the send/notify/ack contract."""

    def __init__(self, message: str, worker: int | None = None, iteration: int | None = None):
        ctx = []
        if worker is not None:
            ctx.append(f"worker={worker}")
        if iteration is not None:
            ctx.append(f"iteration={iteration}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)
        self.worker = worker
        self.iteration = iteration


class StalledPeer(AsapError, TimeoutError):
    """A blocking wait timed out; ``missing`` names the peers not heard from."""

    def __init__(self, message: str, worker: int | None = None, iteration: int | None = None,
                 missing: tuple[int, ...] = ()):
        detail = f"{message} (worker={worker}, iteration={iteration}, missing={list(missing)})"
        super().__init__(detail)
        self.worker = worker
        self.iteration = iteration
        self.missing = tuple(missing)


class ParseError(AsapError, ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


class CheckpointError(AsapError):
    pass
