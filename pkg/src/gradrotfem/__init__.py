"""2D finite element toolkit for fourth-order curl problems.

Mixed and primal discretizations of the grad-rot Hodge-Laplacian on
triangulated planar domains, with tangential/rot-conforming vector elements,
the Stokes-type smooth vector element, and the Argyris element.
"""

__version__ = "0.1.0"
