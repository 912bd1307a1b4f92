# One module per CLI verb; each exposes register(subparsers)
from app.cli.commands import ablate, cost, evaluate, report, train

COMMANDS = [train, evaluate, ablate, cost, report]
