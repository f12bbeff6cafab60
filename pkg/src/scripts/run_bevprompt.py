#!/usr/bin/env python
import sys

from bevprompt.cli import main

if __name__ == '__main__':
    sys.exit(main())
