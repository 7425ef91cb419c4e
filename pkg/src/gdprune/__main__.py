import sys

from gdprune.cli import main

sys.exit(main())
