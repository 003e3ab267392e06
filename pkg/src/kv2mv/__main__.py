import sys

from kv2mv.cli import main

sys.exit(main())
