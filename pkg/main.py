import sys

import hydra
from omegaconf import DictConfig

from mctsep.cli import run


@hydra.main(config_path="mctsep/config", config_name="config", version_base=None)
def main(config: DictConfig):
    # `run` sets up the stderr and run.log.jsonl handlers before validating the config
    sys.exit(run(config))


if __name__ == "__main__":
    main()
