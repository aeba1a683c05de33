import sys

from advshift.cli import main

sys.exit(main())
