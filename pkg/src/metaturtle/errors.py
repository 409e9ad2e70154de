"""Exception types shared across the package."""


class MetaTurtleError(Exception):
    pass


class ShapeError(MetaTurtleError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteError(MetaTurtleError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite result")


class GradientError(MetaTurtleError):
    pass


class DivergenceError(MetaTurtleError):
    """Inner-loop loss became non-finite.

    ``step`` is the inner step at which it happened; ``task_index`` is filled
    in by the outer loop when known.
    """

    def __init__(self, step: int, task_index: int | None = None, detail: str = ""):
        self.step = step
        self.task_index = task_index
        self.detail = detail
        where = f" on task {task_index}" if task_index is not None else ""
        super().__init__(f"inner loop diverged at step {step}{where}{': ' + detail if detail else ''}")


class ConfigError(MetaTurtleError, ValueError):
    pass
