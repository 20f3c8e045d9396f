"""
FL-DEFEND Simulator
A command-line runner for federated-learning experiments in which a share of
the clients mount targeted label-flipping attacks and the server aggregates
with FedAvg, a robust baseline or the DEFEND pipeline.

Setup:
1. Install dependencies: pip install -r requirements.txt
2. Optionally set environment variables in .env (see .env.example):
   - FLDEFEND_OUTPUT_DIR=runs
   - FLDEFEND_LOG_LEVEL=INFO
   - FLDEFEND_WORKERS=1
3. Run: python app.py run configs/desk_benchmark.yaml
4. Compare: python app.py compare runs/fedavg_mr0.30_seed0 runs/defend_mr0.30_seed0
"""

import sys

from dotenv import load_dotenv

from fldefend.cli import main

# Load environment variables
load_dotenv()

if __name__ == "__main__":
    sys.exit(main())
