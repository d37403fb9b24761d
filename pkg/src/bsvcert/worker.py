"""Line-delimited JSON SUT process serving the synthetic landing oracle.

Run as ``python -m bsvcert.worker``; useful as a reference external SUT and
for exercising the harness end to end.
"""

from __future__ import annotations

import argparse
import sys

from .sut import EvalRequest, EvalResponse, ProtocolError, SchemaError, SyntheticVblConfig, synthetic_vbl


def serve(config: SyntheticVblConfig, stdin=sys.stdin, stdout=sys.stdout) -> int:
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = EvalRequest.from_line(line)
        except ProtocolError as exc:
            print(f"bad request: {exc}", file=sys.stderr)
            return 2
        try:
            failure, severity = synthetic_vbl(req.params, config)
            resp = EvalResponse(req.id, failure, severity)
        except SchemaError as exc:
            resp = EvalResponse(req.id, True, None, f"schema error: {exc}")
        stdout.write(resp.to_line() + "\n")
        stdout.flush()
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d0", type=float, default=2.5)
    ap.add_argument("--curvature", type=float, default=0.2)
    ap.add_argument("--alpha-ref", type=float, default=3.0)
    ap.add_argument("--alpha-name", default="glideslope_deg")
    ap.add_argument("--distance-name", default="distance_nm")
    args = ap.parse_args(argv)
    cfg = SyntheticVblConfig(args.d0, args.curvature, args.alpha_ref, args.alpha_name, args.distance_name)
    return serve(cfg)


if __name__ == "__main__":
    sys.exit(main())
