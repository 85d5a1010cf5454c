from graphgames.cli import main
import sys

sys.exit(main())
