//! Holds the `acceptance` test target, kept in its own package so that the
//! long end-to-end run comes after the faster suites.
