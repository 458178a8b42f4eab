"""Report envelopes and trace files for the command-line front end.

Envelopes capture the tool version, the fully resolved configuration, and
the results payload; serialization keeps full double precision so a report
round-trips losslessly and two runs with the same configuration produce
byte-identical payloads (the timing field is the only run-dependent part).
"""

import json
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from .errors import ParameterError

SCHEMA_VERSION = 1

try:
    TOOL_VERSION = metadata.version("finslerlab")
except metadata.PackageNotFoundError:  # running from a source tree
    TOOL_VERSION = "0.0.0"


@dataclass
class ReportEnvelope:
    """One CLI run: command, resolved config echo, timing, results payload.

    The config echo holds every resolved input (model config, numeric
    parameters, seed, budgets), so feeding it back reproduces the payload
    bit for bit on the same build.
    """

    command: str
    config: dict
    results: dict
    timing_seconds: float = 0.0
    schema_version: int = SCHEMA_VERSION
    tool: str = "finslerlab"
    version: str = TOOL_VERSION
    exit_code: int = 0
    messages: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "schemaVersion": self.schema_version,
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "timingSeconds": self.timing_seconds,
            "exitCode": self.exit_code,
            "messages": list(self.messages),
            "results": self.results,
        }

    def to_json(self) -> str:
        # sorted keys and repr-exact floats make serialization deterministic
        # and lossless
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def payload_json(self) -> str:
        """Serialization of everything except the timing field; two runs of
        one config must agree on these bytes exactly."""
        doc = self.as_dict()
        del doc["timingSeconds"]
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ReportEnvelope":
        return cls(
            command=doc["command"], config=doc["config"],
            results=doc["results"], timing_seconds=doc["timingSeconds"],
            schema_version=doc["schemaVersion"], tool=doc["tool"],
            version=doc["version"], exit_code=doc.get("exitCode", 0),
            messages=list(doc.get("messages", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "ReportEnvelope":
        return cls.from_dict(json.loads(text))

    def write(self, path: str) -> None:
        if not path:
            raise ParameterError("report path must be a non-empty string")
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self.to_json())
        except OSError as exc:
            raise OSError(f"cannot write report to {path!r}: {exc}") from exc


def emit_geodesic_csv(path: str, gp) -> None:
    """Write the accepted nodes of a geodesic path as CSV with header
    t,x1..xn,v1..vn, one row per node, 17 significant digits."""
    if not isinstance(path, str) or not path:
        raise ParameterError("csv path must be a non-empty string")
    n = gp.x.shape[-1]
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)]
                      + [f"v{i + 1}" for i in range(n)])
    lines = [header]
    for t, x, v in zip(gp.t, gp.x, gp.v):
        row = [t] + list(x) + list(v)
        lines.append(",".join(f"{val:.17g}" for val in row))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write geodesic csv to {path!r}: {exc}") from exc


def load_geodesic_csv(path: str):
    """Read a trace written by emit_geodesic_csv; returns (t, x, v)."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise OSError(f"cannot read geodesic csv from {path!r}: {exc}") from exc
    n = (data.shape[1] - 1) // 2
    return data[:, 0], data[:, 1:1 + n], data[:, 1 + n:]
