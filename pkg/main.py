#!/usr/bin/env python3
"""
RegionSpot - Command-Line Entry Point

Usage:
    python main.py train --config lite-toy --out runs/lite
    python main.py infer --checkpoint runs/lite/final.rspt --annotations data/annotations.json --vocab vocab.txt --out runs/infer
    python main.py eval  --predictions runs/infer/predictions.jsonl --annotations data/annotations.json --out runs/eval
    python main.py attn  --checkpoint runs/lite/final.rspt --image data/image_0000.png --boxes "0.1,0.1,0.4,0.5" --out runs/attn
"""

import sys

from regionspot.cli import main

if __name__ == "__main__":
    sys.exit(main())
