from typing import Optional


class SwarmSimError(Exception):
    """Base class for every error raised by swarmsim."""
    pass


class ConfigError(SwarmSimError):
    """A configuration file, preset name or option value is invalid."""
    pass


class TraceParseError(SwarmSimError):
    """
    A trace file could not be parsed.

    The message carries the file name, line and column in the
    ``path:line:col: message`` form, followed by the offending line and a
    caret under the column, so it can be pasted straight into an editor.
    """

    def __init__(self, filename: str, message: str, line: int = 0, col: int = 0,
                 line_text: str = ""):
        self.filename = filename
        self.line = line
        self.col = col
        self.line_text = line_text
        self.reason = message
        super().__init__(format_location(filename, message, line, col, line_text))


# The name used throughout the docs and the CLI diagnostics
ParseError = TraceParseError


class NegativePopulationError(SwarmSimError):
    """Applying a trace would leave fewer live peers than the allowed floor."""

    def __init__(self, t: float, population: int, floor: int, line: Optional[int] = None):
        self.t = t
        self.population = population
        self.floor = floor
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(
            f"Population drops to {population} at t={t:g}s{where}, "
            f"below the floor of {floor} peer(s)"
        )


class NoPeerAvailable(SwarmSimError):
    """Every peer serving a pipeline stage is banned or gone."""

    def __init__(self, stage: int):
        self.stage = stage
        super().__init__(f"No peer available for stage {stage}")


def format_location(filename: str, message: str, line: int = 0, col: int = 0,
                    line_text: str = "") -> str:
    """
    Format an error message with file, line and column context.

    Parameters:
        filename (str): The file being read.
        message (str): What went wrong.
        line (int): 1-based line number, 0 when unknown.
        col (int): 1-based column, 0 when unknown.
        line_text (str): The text of the offending line, if available.

    Returns:
        str: The formatted, possibly multi-line, message.
    """
    if not line:
        return f"{filename}: {message}"

    error_msg = f"{filename}:{line}:{col}: {message}"
    if line_text:
        error_msg += f"\n\n{line}: {line_text}\n"
        # Account for the "line: " prefix
        pointer = " " * (len(str(line)) + 2)
        pointer += " " * max(col - 1, 0)
        pointer += "^"
        error_msg += pointer
    return error_msg
