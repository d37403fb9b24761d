"""Line-protocol test SUT with deliberately misbehaving modes.

usage: fake_sut.py MODE
  echo       failure = distance_nm > 0, severity = distance_nm
  slow       sleeps far longer than any test timeout before answering
  malformed  answers with a line that is not JSON
  crash      exits with status 3 on the first request
  wrong_id   answers with the request id plus one
  crash_at   answers normally, but exits with status 4 on distance_nm >= 3
  jitter     sleeps a random short time before answering (exercises concurrency)
"""

import json
import random
import sys
import time


def main():
    mode = sys.argv[1]
    for line in sys.stdin:
        req = json.loads(line)
        d = req["params"]["distance_nm"]
        if mode == "slow":
            time.sleep(60)
        if mode == "malformed":
            print("this is not json", flush=True)
            continue
        if mode == "crash" or (mode == "crash_at" and d >= 3):
            print("simulated detector crash", file=sys.stderr, flush=True)
            sys.exit(3 if mode == "crash" else 4)
        if mode == "jitter":
            time.sleep(random.random() * 0.02)
        rid = req["id"] + 1 if mode == "wrong_id" else req["id"]
        print(json.dumps({"id": rid, "failure": d > 0, "severity": d}), flush=True)


if __name__ == "__main__":
    main()
