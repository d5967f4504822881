import sys

from tise.cli import main

sys.exit(main())
