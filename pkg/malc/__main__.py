import sys

from malc.cli import main

sys.exit(main())
