import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

from pill_code import COMMANDS, EXIT_USAGE
from pill_utils import load_and_validate_config, load_and_validate_env, setup_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pill",
        description="Modality adapter experts and attention gates on a frozen decoder, trained on synthetic VQA.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="key=value config file")
        sub.add_argument("--seed", type=int, help="random seed (overrides the config file)")
        sub.add_argument("--out", help="output path")
        sub.add_argument("--data", help="dataset or corpus path")
        sub.add_argument("--ckpt", help="input checkpoint path")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # Load environment variables from .env file
    load_dotenv()
    env_result = load_and_validate_env()
    if not env_result["success"]:
        print(f"Error: {env_result['error']}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(env_result["log_level"])

    config_result = load_and_validate_config(
        args.config,
        {"seed": args.seed, "out": args.out, "data": args.data, "ckpt": args.ckpt},
    )
    if not config_result["success"]:
        print(f"Error: {config_result['error']}", file=sys.stderr)
        return EXIT_USAGE

    result = COMMANDS[args.command](config_result["config"])

    print("\n" + "=" * 80)
    print(f"{args.command}: {'✅ SUCCESSFUL' if result['success'] else '❌ FAILED'} (exit code {result['exit_code']})")
    if not result["success"]:
        print(f"Error: {result['error']}")
    elif "metrics" in result:
        metrics = result["metrics"]
        print(f"Accuracy: {metrics['accuracy']:.4f} on {metrics['n']} samples (chance {metrics['chance']:.4f})")
    elif "report" in result:
        report = result["report"]
        print(f"Steps: {report['n_steps']}, final loss: {report['final_loss']}")
    print("=" * 80 + "\n")

    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
