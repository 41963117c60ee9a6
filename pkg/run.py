#!/usr/bin/env python3
from multires.main import cli

if __name__ == "__main__":
    cli()
